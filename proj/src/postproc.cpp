#include "coseg/postproc.hpp"

#include <cmath>
#include <queue>
#include <stdexcept>
#include <tuple>

#include "coseg/sobel.hpp"

namespace coseg::postproc {

void sobel_grad(const std::vector<float>& map, int H, int W, std::vector<float>& gx,
                std::vector<float>& gy) {
  if (H < 3 || W < 3) throw std::invalid_argument("sobel_grad: map must be at least 3x3");
  if (map.size() != static_cast<std::size_t>(H) * W)
    throw std::invalid_argument("sobel_grad: size mismatch");
  gx.assign(map.size(), 0.f);
  gy.assign(map.size(), 0.f);
  auto at = [&](int y, int x) {
    y = std::min(std::max(y, 0), H - 1);
    x = std::min(std::max(x, 0), W - 1);
    return map[static_cast<std::size_t>(y) * W + x];
  };
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double sx = 0, sy = 0;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          double v = at(y + ky - 1, x + kx - 1);
          sx += kSobelX[ky * 3 + kx] * v;
          sy += kSobelY[ky * 3 + kx] * v;
        }
      gx[static_cast<std::size_t>(y) * W + x] = static_cast<float>(sx);
      gy[static_cast<std::size_t>(y) * W + x] = static_cast<float>(sy);
    }
  }
}

LabelMap connected_components(const LabelMap& binary) {
  LabelMap out;
  out.H = binary.H;
  out.W = binary.W;
  out.ids.assign(binary.ids.size(), 0);
  std::int32_t next = 1;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < binary.ids.size(); ++start) {
    if (binary.ids[start] == 0 || out.ids[start] != 0) continue;
    out.ids[start] = next;
    stack.assign(1, start);
    while (!stack.empty()) {
      std::size_t i = stack.back();
      stack.pop_back();
      int y = static_cast<int>(i / binary.W), x = static_cast<int>(i % binary.W);
      for (auto [dy, dx] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= binary.H || nx < 0 || nx >= binary.W) continue;
        std::size_t ni = static_cast<std::size_t>(ny) * binary.W + nx;
        if (binary.ids[ni] != 0 && out.ids[ni] == 0) {
          out.ids[ni] = next;
          stack.push_back(ni);
        }
      }
    }
    ++next;
  }
  return out;
}

LabelMap instances_from_hv(const std::vector<float>& binary_prob, const HVMaps& hv,
                           const Thresholds& th) {
  const int H = hv.H, W = hv.W;
  if (binary_prob.size() != static_cast<std::size_t>(H) * W)
    throw std::invalid_argument("instances_from_hv: shape mismatch");

  LabelMap fg;
  fg.H = H; fg.W = W;
  fg.ids.resize(binary_prob.size());
  bool any = false;
  for (std::size_t i = 0; i < binary_prob.size(); ++i) {
    fg.ids[i] = binary_prob[i] > th.t_fg ? 1 : 0;
    any = any || fg.ids[i];
  }
  LabelMap out;
  out.H = H; out.W = W;
  out.ids.assign(fg.ids.size(), 0);
  if (!any) return out;

  // Energy: max of the two HV gradient magnitudes, min-max normalized.
  std::vector<float> gxh, gyh, gxv, gyv;
  sobel_grad(hv.h, H, W, gxh, gyh);
  sobel_grad(hv.v, H, W, gxv, gyv);
  std::vector<float> energy(fg.ids.size());
  float emin = 1e30f, emax = -1e30f;
  for (std::size_t i = 0; i < energy.size(); ++i) {
    float mh = std::sqrt(gxh[i] * gxh[i] + gyh[i] * gyh[i]);
    float mv = std::sqrt(gxv[i] * gxv[i] + gyv[i] * gyv[i]);
    energy[i] = std::max(mh, mv);
    emin = std::min(emin, energy[i]);
    emax = std::max(emax, energy[i]);
  }
  if (emax > emin)
    for (auto& e : energy) e = (e - emin) / (emax - emin);
  else
    for (auto& e : energy) e = 0.f;

  // Markers: foreground pixels near an instance center, where both HV values
  // are small. Thresholding the values rather than the gradient keeps the
  // marker criterion independent of instance size (the interior gradient of a
  // small nucleus is steep, its center values are still near zero).
  LabelMap marker_mask;
  marker_mask.H = H; marker_mask.W = W;
  marker_mask.ids.resize(fg.ids.size());
  for (std::size_t i = 0; i < fg.ids.size(); ++i)
    marker_mask.ids[i] = (fg.ids[i] != 0 && std::abs(hv.h[i]) < th.t_marker &&
                          std::abs(hv.v[i]) < th.t_marker)
                             ? 1
                             : 0;
  LabelMap markers = connected_components(marker_mask);
  // Markers may legitimately be much smaller than a whole instance.
  const std::int64_t marker_min = std::max(1, th.min_area / 4);
  std::vector<std::int64_t> area(1, 0);
  for (auto id : markers.ids) {
    if (id >= static_cast<std::int32_t>(area.size())) area.resize(id + 1, 0);
    if (id > 0) ++area[id];
  }
  for (auto& id : markers.ids)
    if (id > 0 && area[id] < marker_min) id = 0;

  // Marker-based watershed: flood ascending energy, 4-connected, foreground only.
  using Item = std::tuple<float, std::size_t>;  // (energy, pixel) - index tie-break
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  for (std::size_t i = 0; i < markers.ids.size(); ++i) {
    if (markers.ids[i] > 0) {
      out.ids[i] = markers.ids[i];
      pq.push({energy[i], i});
    }
  }
  while (!pq.empty()) {
    auto [e, i] = pq.top();
    pq.pop();
    int y = static_cast<int>(i / W), x = static_cast<int>(i % W);
    for (auto [dy, dx] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      int ny = y + dy, nx = x + dx;
      if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
      std::size_t ni = static_cast<std::size_t>(ny) * W + nx;
      if (fg.ids[ni] != 0 && out.ids[ni] == 0) {
        out.ids[ni] = out.ids[i];
        pq.push({energy[ni], ni});
      }
    }
  }

  // Drop instances below the area threshold.
  std::vector<std::int64_t> final_area(1, 0);
  for (auto id : out.ids) {
    if (id >= static_cast<std::int32_t>(final_area.size())) final_area.resize(id + 1, 0);
    if (id > 0) ++final_area[id];
  }
  for (auto& id : out.ids)
    if (id > 0 && final_area[id] < th.min_area) id = 0;
  return out;
}

}  // namespace coseg::postproc
