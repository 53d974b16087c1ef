#include "coseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>

#include "coseg/postproc.hpp"

namespace coseg::metrics {

namespace {

void check_shapes(const LabelMap& a, const LabelMap& b) {
  if (a.H != b.H || a.W != b.W || a.ids.size() != b.ids.size())
    throw std::invalid_argument("metrics: shape mismatch");
}

std::int64_t area_of(const LabelMap& m) {
  std::int64_t n = 0;
  for (auto id : m.ids) n += id != 0;
  return n;
}

// Large finite stand-in for infinity: true infinities produce NaN in the
// parabola intersection below. Dominates any real squared image distance.
constexpr double kFar = 1e12;

// Felzenszwalb-Huttenlocher 1-D squared distance transform.
void dt1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  d.resize(n);
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (q - v[k]) * static_cast<double>(q - v[k]) + f[v[k]];
  }
}

// Squared Euclidean distance to the nearest foreground pixel.
std::vector<double> dist2_to_fg(const LabelMap& m) {
  std::vector<double> d(m.ids.size());
  for (std::size_t i = 0; i < m.ids.size(); ++i) d[i] = m.ids[i] != 0 ? 0.0 : kFar;
  std::vector<double> col(m.H), out;
  for (int x = 0; x < m.W; ++x) {
    for (int y = 0; y < m.H; ++y) col[y] = d[static_cast<std::size_t>(y) * m.W + x];
    dt1d(col, out);
    for (int y = 0; y < m.H; ++y) d[static_cast<std::size_t>(y) * m.W + x] = out[y];
  }
  std::vector<double> row(m.W);
  for (int y = 0; y < m.H; ++y) {
    for (int x = 0; x < m.W; ++x) row[x] = d[static_cast<std::size_t>(y) * m.W + x];
    dt1d(row, out);
    for (int x = 0; x < m.W; ++x) d[static_cast<std::size_t>(y) * m.W + x] = out[x];
  }
  return d;
}

double directed_hausdorff(const LabelMap& from, const LabelMap& to) {
  std::vector<double> d = dist2_to_fg(to);
  double worst = 0;
  for (std::size_t i = 0; i < from.ids.size(); ++i)
    if (from.ids[i] != 0) worst = std::max(worst, d[i]);
  return std::sqrt(worst);
}

struct OverlapTable {
  std::map<std::int32_t, std::int64_t> pred_area, gt_area;
  std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> inter;
};

OverlapTable overlaps(const LabelMap& pred, const LabelMap& gt) {
  OverlapTable t;
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    std::int32_t p = pred.ids[i], g = gt.ids[i];
    if (p != 0) ++t.pred_area[p];
    if (g != 0) ++t.gt_area[g];
    if (p != 0 && g != 0) ++t.inter[{p, g}];
  }
  return t;
}

PanopticResult panoptic_from_match(const MatchResult& m) {
  PanopticResult r;
  if (m.n_pred == 0 && m.n_gt == 0) {
    r.pq = r.dq = r.sq = 100.0;
    return r;
  }
  const int tp = static_cast<int>(m.pairs.size());
  const int fp = m.n_pred - tp, fn = m.n_gt - tp;
  double dq = tp / (tp + 0.5 * fp + 0.5 * fn);
  double sq = 0;
  for (double iou : m.ious) sq += iou;
  sq = tp > 0 ? sq / tp : 0.0;
  r.dq = 100.0 * dq;
  r.sq = 100.0 * sq;
  r.pq = 100.0 * dq * sq;
  return r;
}

}  // namespace

double dice_binary(const LabelMap& pred, const LabelMap& gt) {
  check_shapes(pred, gt);
  std::int64_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    bool p = pred.ids[i] != 0, g = gt.ids[i] != 0;
    inter += p && g;
    a += p;
    b += g;
  }
  if (a + b == 0) return 100.0;
  return 100.0 * 2.0 * inter / static_cast<double>(a + b);
}

double miou_multiclass(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  check_shapes(pred, gt);
  double sum = 0;
  int counted = 0;
  for (int c = 0; c <= n_classes; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
      bool p = pred.ids[i] == c, g = gt.ids[i] == c;
      inter += p && g;
      uni += p || g;
    }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / uni;
    ++counted;
  }
  return counted == 0 ? 100.0 : 100.0 * sum / counted;
}

double hausdorff_binary(const LabelMap& pred, const LabelMap& gt) {
  check_shapes(pred, gt);
  std::int64_t ap = area_of(pred), ag = area_of(gt);
  if (ap == 0 && ag == 0) return 0.0;
  if (ap == 0 || ag == 0) {
    double dy = pred.H - 1, dx = pred.W - 1;
    return std::sqrt(dy * dy + dx * dx);
  }
  return std::max(directed_hausdorff(pred, gt), directed_hausdorff(gt, pred));
}

MatchResult match_instances(const LabelMap& pred, const LabelMap& gt) {
  check_shapes(pred, gt);
  OverlapTable t = overlaps(pred, gt);
  MatchResult m;
  m.n_pred = static_cast<int>(t.pred_area.size());
  m.n_gt = static_cast<int>(t.gt_area.size());
  struct Cand {
    double iou;
    std::int32_t p, g;
  };
  std::vector<Cand> cands;
  for (const auto& [key, in] : t.inter) {
    auto [p, g] = key;
    double iou = static_cast<double>(in) / (t.pred_area[p] + t.gt_area[g] - in);
    if (iou > 0.5) cands.push_back({iou, p, g});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::map<std::int32_t, bool> used_p, used_g;
  for (const auto& c : cands) {
    if (used_p[c.p] || used_g[c.g]) continue;
    used_p[c.p] = used_g[c.g] = true;
    m.pairs.push_back({c.p, c.g});
    m.ious.push_back(c.iou);
  }
  return m;
}

DetectionPRF detection_prf(const MatchResult& m) {
  DetectionPRF r;
  const int tp = static_cast<int>(m.pairs.size());
  r.precision = m.n_pred > 0 ? 100.0 * tp / m.n_pred : (m.n_gt == 0 ? 100.0 : 0.0);
  r.recall = m.n_gt > 0 ? 100.0 * tp / m.n_gt : (m.n_pred == 0 ? 100.0 : 0.0);
  r.f1 = (r.precision + r.recall) > 0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

double aji(const LabelMap& pred, const LabelMap& gt) {
  check_shapes(pred, gt);
  OverlapTable t = overlaps(pred, gt);
  if (t.pred_area.empty() && t.gt_area.empty()) return 1.0;
  std::int64_t C = 0, U = 0;
  std::map<std::int32_t, bool> used_p;
  for (const auto& [g, ga] : t.gt_area) {
    double best_iou = -1;
    std::int32_t best_p = 0;
    std::int64_t best_in = 0;
    for (const auto& [key, in] : t.inter) {
      if (key.second != g || used_p[key.first]) continue;
      double iou = static_cast<double>(in) / (t.pred_area[key.first] + ga - in);
      if (iou > best_iou) {
        best_iou = iou;
        best_p = key.first;
        best_in = in;
      }
    }
    if (best_iou < 0) {
      U += ga;
      continue;
    }
    used_p[best_p] = true;
    C += best_in;
    U += t.pred_area[best_p] + ga - best_in;
  }
  for (const auto& [p, pa] : t.pred_area)
    if (!used_p[p]) U += pa;
  return U > 0 ? static_cast<double>(C) / U : 1.0;
}

PanopticResult panoptic_quality(const LabelMap& pred, const LabelMap& gt) {
  check_shapes(pred, gt);
  return panoptic_from_match(match_instances(pred, gt));
}

PanopticResult tissue_panoptic(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  check_shapes(pred, gt);
  double pq = 0, dq = 0, sq = 0;
  int counted = 0;
  for (int c = 1; c <= n_classes; ++c) {
    LabelMap pm, gm;
    pm.H = gm.H = pred.H;
    pm.W = gm.W = pred.W;
    pm.ids.resize(pred.ids.size());
    gm.ids.resize(gt.ids.size());
    bool any = false;
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
      pm.ids[i] = pred.ids[i] == c;
      gm.ids[i] = gt.ids[i] == c;
      any = any || pm.ids[i] || gm.ids[i];
    }
    if (!any) continue;
    PanopticResult r = panoptic_quality(postproc::connected_components(pm),
                                        postproc::connected_components(gm));
    pq += r.pq;
    dq += r.dq;
    sq += r.sq;
    ++counted;
  }
  PanopticResult out;
  if (counted == 0) {
    out.pq = out.dq = out.sq = 100.0;
    return out;
  }
  out.pq = pq / counted;
  out.dq = dq / counted;
  out.sq = sq / counted;
  return out;
}

}  // namespace coseg::metrics
