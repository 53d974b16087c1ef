// Acceptance gate: runs every release criterion end to end and prints one
// pass/fail line per criterion. Exit code is the number of failed criteria.
//
// The slow directional-ablation criterion (8) runs last; everything else
// finishes in a few minutes. All tolerances are pinned below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "coseg/metrics.hpp"
#include "coseg/oracle.hpp"
#include "coseg/pipeline.hpp"
#include "coseg/postproc.hpp"
#include "gradcheck.hpp"

using namespace coseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances and budgets.
// ---------------------------------------------------------------------------
constexpr double kFactorTol = 1e-12;        // joint reconstruction, max abs
constexpr double kFactorTimeLimit = 10.0;   // seconds
constexpr double kMiRelTol = 0.05;          // sampled vs exact MI
constexpr long kMiSamples = 100000;
constexpr double kGradRelTol = 1e-4;        // analytic vs central differences
constexpr int kGradMinCoords = 50;          // sampled parameters per module
constexpr double kGradTimeLimit = 300.0;    // seconds, all gradchecks together
constexpr double kEq8Tol = 1e-9;            // loss composition identity
constexpr double kExactTol = 1e-12;         // metric oracle agreement
constexpr double kPqFixtureTol = 1e-9;      // PQ on the hand-built fixture
constexpr int kMetricPairs = 200;
constexpr double kRecoveryMinIoU = 0.9;     // mean matched IoU, clean inputs
constexpr double kRecoveryMaxCountErr = 0.05;
constexpr int kRecoverySamples = 20;
constexpr int kAblTrainImages = 200;        // coupled set: 200 train @ 256^2
constexpr int kAblEpochs = 40;
constexpr int kAblSeeds = 3;
constexpr double kAblMinDiceGap = 1.0;      // full - baseline, Dice points
constexpr double kAblTimeLimit = 7200.0;    // seconds (CPU budget)
constexpr double kPeftMaxTrainableFrac = 0.15;
constexpr double kTrainLossTol = 1e-6;      // determinism across reruns

struct CriterionResult {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
};

std::vector<CriterionResult> g_results;

void record(int id, const std::string& title, bool pass, const std::string& detail) {
  g_results.push_back({id, title, pass, detail});
  std::fprintf(stderr, "  done: criterion %d (%s)\n", id, pass ? "pass" : "FAIL");
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Small-but-real model configuration used by the fast structural criteria.
ModelConfig small_cfg(int seed = 0) {
  ModelConfig cfg;
  cfg.enc.stage_depths = {1, 1, 1};
  cfg.enc.stage_widths = {8, 12, 16};
  cfg.enc.window_size = 2;
  cfg.dec.width = 16;
  cfg.dec.n_classes = 2;
  cfg.rp_hidden = 8;
  cfg.seed = seed;
  return cfg;
}

// Configuration for the directional ablation: narrower than the deployment
// model so the 12-run ladder (4 variants x 3 seeds, 40 epochs each) fits the
// CPU time budget with margin.
ModelConfig ablation_cfg(int seed = 0) {
  ModelConfig cfg;
  cfg.enc.stage_widths = {6, 12, 24};
  cfg.enc.stage_depths = {1, 1, 1};
  cfg.dec.width = 24;
  cfg.dec.n_classes = 3;
  cfg.rp_hidden = 12;
  cfg.seed = seed;
  return cfg;
}

// The deployment-size configuration (the default the CLI builds).
ModelConfig deploy_cfg(int seed = 0) {
  ModelConfig cfg;
  cfg.enc.stage_widths = {8, 16, 32};
  cfg.enc.stage_depths = {1, 1, 1};
  cfg.dec.width = 32;
  cfg.dec.n_classes = 3;
  cfg.rp_hidden = 16;
  cfg.seed = seed;
  return cfg;
}

Tensor<double> rand_image(int H, int W, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<double> img({H, W, 3});
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = u(rng);
  return img;
}

Targets<double> rand_targets(int H, int W, int K, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cd(0, K);
  std::uniform_real_distribution<double> u(0, 1);
  Targets<double> tg;
  tg.H = H;
  tg.W = W;
  tg.K = K;
  tg.semantic = std::make_shared<std::vector<int>>(H * W);
  for (auto& v : *tg.semantic) v = cd(rng);
  tg.tissue_fg = Tensor<double>({H, W, 1});
  tg.nuclei_fg = Tensor<double>({H, W, 1});
  for (std::int64_t i = 0; i < tg.tissue_fg.size(); ++i) {
    tg.tissue_fg[i] = (*tg.semantic)[i] != 0;
    tg.nuclei_fg[i] = u(rng) < 0.3;
  }
  tg.hv = Tensor<double>({H, W, 2});
  for (std::int64_t i = 0; i < tg.hv.size(); ++i) tg.hv[i] = 2 * u(rng) - 1;
  return tg;
}

double grad_norm(Tape<double>& t, int id) {
  const Tensor<double>& g = t.grad(id);
  double n = 0;
  for (std::int64_t i = 0; i < g.size(); ++i) n += g[i] * g[i];
  return std::sqrt(n);
}

int count_ids(const LabelMap& m) {
  std::set<std::int32_t> s;
  for (auto id : m.ids)
    if (id) s.insert(id);
  return static_cast<int>(s.size());
}

// ---------------------------------------------------------------------------
// Brute-force metric references (independent of the library implementations).
// ---------------------------------------------------------------------------
LabelMap make_map(int H, int W) {
  LabelMap m;
  m.H = H;
  m.W = W;
  m.ids.assign(static_cast<std::size_t>(H) * W, 0);
  return m;
}

void stamp_disc(LabelMap& m, double cy, double cx, double r, std::int32_t id) {
  for (int y = 0; y < m.H; ++y)
    for (int x = 0; x < m.W; ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) m.at(y, x) = id;
}

LabelMap random_instances(int H, int W, unsigned seed, int max_n = 6) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> nd(0, max_n);
  std::uniform_real_distribution<double> yd(0, H - 1), xd(0, W - 1), rd(1.5, 5.0);
  LabelMap m = make_map(H, W);
  int n = nd(rng);
  for (int i = 1; i <= n; ++i) stamp_disc(m, yd(rng), xd(rng), rd(rng), i);
  return m;
}

LabelMap perturb(const LabelMap& gt, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> sh(-2, 2);
  int dy = sh(rng), dx = sh(rng);
  LabelMap p = make_map(gt.H, gt.W);
  for (int y = 0; y < gt.H; ++y)
    for (int x = 0; x < gt.W; ++x) {
      int sy = y - dy, sx = x - dx;
      if (sy < 0 || sy >= gt.H || sx < 0 || sx >= gt.W) continue;
      std::int32_t id = gt.at(sy, sx);
      if (id != 0 && id % 5 == 4) id = 0;
      p.at(y, x) = id;
    }
  return p;
}

struct BruteOverlap {
  std::vector<std::int32_t> pids, gids;
  std::vector<std::vector<std::int64_t>> inter;
  std::vector<std::int64_t> parea, garea;
};

std::vector<std::int32_t> distinct_ids(const LabelMap& m) {
  std::set<std::int32_t> s;
  for (auto id : m.ids)
    if (id != 0) s.insert(id);
  return {s.begin(), s.end()};
}

BruteOverlap brute_overlaps(const LabelMap& pred, const LabelMap& gt) {
  BruteOverlap b;
  b.pids = distinct_ids(pred);
  b.gids = distinct_ids(gt);
  b.inter.assign(b.pids.size(), std::vector<std::int64_t>(b.gids.size(), 0));
  b.parea.assign(b.pids.size(), 0);
  b.garea.assign(b.gids.size(), 0);
  for (std::size_t pi = 0; pi < b.pids.size(); ++pi)
    for (auto id : pred.ids) b.parea[pi] += id == b.pids[pi];
  for (std::size_t gi = 0; gi < b.gids.size(); ++gi)
    for (auto id : gt.ids) b.garea[gi] += id == b.gids[gi];
  for (std::size_t pi = 0; pi < b.pids.size(); ++pi)
    for (std::size_t gi = 0; gi < b.gids.size(); ++gi)
      for (std::size_t i = 0; i < pred.ids.size(); ++i)
        b.inter[pi][gi] += pred.ids[i] == b.pids[pi] && gt.ids[i] == b.gids[gi];
  return b;
}

// IoU > 0.5 pairs are one-to-one, so collecting all such pairs is exact.
metrics::MatchResult brute_match(const LabelMap& pred, const LabelMap& gt) {
  BruteOverlap b = brute_overlaps(pred, gt);
  metrics::MatchResult m;
  m.n_pred = static_cast<int>(b.pids.size());
  m.n_gt = static_cast<int>(b.gids.size());
  for (std::size_t pi = 0; pi < b.pids.size(); ++pi)
    for (std::size_t gi = 0; gi < b.gids.size(); ++gi) {
      double iou = static_cast<double>(b.inter[pi][gi]) /
                   (b.parea[pi] + b.garea[gi] - b.inter[pi][gi]);
      if (iou > 0.5) {
        m.pairs.push_back({b.pids[pi], b.gids[gi]});
        m.ious.push_back(iou);
      }
    }
  return m;
}

double brute_aji(const LabelMap& pred, const LabelMap& gt) {
  BruteOverlap b = brute_overlaps(pred, gt);
  if (b.pids.empty() && b.gids.empty()) return 1.0;
  std::vector<bool> used(b.pids.size(), false);
  std::int64_t C = 0, U = 0;
  for (std::size_t gi = 0; gi < b.gids.size(); ++gi) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t pi = 0; pi < b.pids.size(); ++pi) {
      if (used[pi] || b.inter[pi][gi] == 0) continue;
      double iou = static_cast<double>(b.inter[pi][gi]) /
                   (b.parea[pi] + b.garea[gi] - b.inter[pi][gi]);
      if (iou > best) {
        best = iou;
        arg = pi;
      }
    }
    if (best < 0) {
      U += b.garea[gi];
      continue;
    }
    used[arg] = true;
    C += b.inter[arg][gi];
    U += b.parea[arg] + b.garea[gi] - b.inter[arg][gi];
  }
  for (std::size_t pi = 0; pi < b.pids.size(); ++pi)
    if (!used[pi]) U += b.parea[pi];
  return U > 0 ? static_cast<double>(C) / U : 1.0;
}

// ---------------------------------------------------------------------------
// Criteria.
// ---------------------------------------------------------------------------

// 1. Both factorization orderings reconstruct random joints exactly.
void criterion_1() {
  using namespace coseg::oracle;
  auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> nd(2, 8);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    JointTable j = make_random_joint(nd(rng), nd(rng), 5000 + i);
    for (Direction dir : {Direction::Y1First, Direction::Y2First}) {
      JointTable back = joint_from_factors(factorize(j, dir));
      worst = std::max(worst, (back.probs - j.probs).cwiseAbs().maxCoeff());
    }
  }
  double dt = seconds_since(t0);
  bool ok = worst < kFactorTol && dt < kFactorTimeLimit;
  record(1, "factorization identities on 100 random joints", ok,
         fmt("max abs err %.2e (< %.0e), %.2f s (< %.0f s)", worst, kFactorTol, dt,
             kFactorTimeLimit));
}

// 2. Sampled mutual information tracks the analytic value; product joints
//    give exactly zero.
void criterion_2() {
  using namespace coseg::oracle;
  double worst_rel = 0;
  int used = 0;
  // Deterministic scan, keeping joints with enough MI for a relative bound.
  for (unsigned seed = 0; used < 10; ++seed) {
    JointTable j = make_random_joint(4, 4, 9000 + seed);
    double exact = mutual_information(j);
    if (exact < 0.05) continue;
    double est = mi_sample_estimate(j, kMiSamples, 777 + seed);
    worst_rel = std::max(worst_rel, std::abs(est - exact) / exact);
    ++used;
  }
  Eigen::VectorXd a(3);
  a << 0.2, 0.5, 0.3;
  Eigen::RowVectorXd b(4);
  b << 0.1, 0.4, 0.25, 0.25;
  JointTable prod;
  prod.probs = a * b;
  double mi_exact = std::abs(mutual_information(prod));
  double mi_sampled = mi_sample_estimate(prod, 1000, 3);
  bool ok = worst_rel < kMiRelTol && mi_exact < 1e-15 && mi_sampled == 0.0;
  record(2, "mutual information estimator", ok,
         fmt("worst rel err %.3f (< %.2f) on 10 joints; product joint exact %.1e, sampled %g",
             worst_rel, kMiRelTol, mi_exact, mi_sampled));
}

// 3. Analytic gradients match central differences for every trainable module.
void criterion_3() {
  using coseg::testing::gradcheck_params;
  auto t0 = Clock::now();
  std::ostringstream detail;
  bool ok = true;

  // Prompt encoder.
  {
    CoSegModel<double> m(small_cfg(17));
    Tensor<double> img = rand_image(32, 32, 18);
    std::mt19937_64 rng(19);
    Tensor<double> mu = Tensor<double>::randn({32, 32, 1}, rng, 0.5);
    auto res = gradcheck_params(
        m.store,
        [&](Tape<double>& t) {
          Var<double> z = m.encode(t, ops::leaf(t, img, false));
          Var<double> g = m.rp_sem()(t, m.store, ops::leaf(t, mu, false), z);
          return ops::mean_all(ops::mul(g, g));
        },
        60, 21);
    ok = ok && res.n_checked >= kGradMinCoords && res.max_rel_err < kGradRelTol;
    detail << fmt("rp %.1e/%d ", res.max_rel_err, res.n_checked);
  }

  // Mask decoder (prompted, cross-guided path).
  {
    CoSegModel<double> m(small_cfg(18));
    Tensor<double> img = rand_image(32, 32, 20);
    std::mt19937_64 rng(23);
    Tensor<double> pt = Tensor<double>::randn({2, 2, 16}, rng, 0.5);
    Tensor<double> pn = Tensor<double>::randn({2, 2, 16}, rng, 0.5);
    auto res = gradcheck_params(
        m.store,
        [&](Tape<double>& t) {
          Var<double> z = m.encode(t, ops::leaf(t, img, false));
          DecoderOutput<double> out = m.decoder().decode(
              t, m.store, z, ops::leaf(t, pt, false), ops::leaf(t, pn, false), 32, 32, true);
          return ops::add(ops::mean_all(ops::mul(out.sem_logits, out.sem_logits)),
                          ops::mean_all(ops::mul(out.hv, out.hv)));
        },
        60, 27);
    ok = ok && res.n_checked >= kGradMinCoords && res.max_rel_err < kGradRelTol;
    detail << fmt("decoder %.1e/%d ", res.max_rel_err, res.n_checked);
  }

  // Probabilistic toy model (both parameter blocks, coupled and uncoupled).
  {
    using namespace coseg::oracle;
    ToyModel m = ToyModel::random(4, 3, 3, 9, 0.3);
    auto batch = make_coupled_batch(ToyModel::random(4, 3, 3, 10, 0.8), 32, 5);
    double worst = 0;
    int checked = 0;
    for (bool ignore : {false, true}) {
      Eigen::MatrixXd g1, g2;
      joint_nll_grad(m, batch, g1, g2, ignore);
      const double h = 1e-6;
      auto probe = [&](Eigen::MatrixXd& w, const Eigen::MatrixXd& g, int r, int c) {
        double orig = w(r, c);
        w(r, c) = orig + h;
        double fp = joint_nll(m, batch, ignore);
        w(r, c) = orig - h;
        double fm = joint_nll(m, batch, ignore);
        w(r, c) = orig;
        double num = (fp - fm) / (2 * h);
        worst = std::max(worst, coseg::testing::rel_err(g(r, c), num));
        ++checked;
      };
      for (int r = 0; r < m.w1.rows(); ++r)
        for (int c = 0; c < m.w1.cols(); ++c) probe(m.w1, g1, r, c);
      for (int r = 0; r < m.w2.rows(); ++r)
        for (int c = 0; c < m.w2.cols(); ++c) probe(m.w2, g2, r, c);
    }
    ok = ok && checked >= kGradMinCoords && worst < kGradRelTol;
    detail << fmt("toy %.1e/%d ", worst, checked);
  }

  // Whole network through the composed training loss.
  {
    CoSegModel<double> m(small_cfg(18));
    Tensor<double> img = rand_image(32, 32, 22);
    Targets<double> tg = rand_targets(32, 32, 2, 23);
    auto res = gradcheck_params(
        m.store,
        [&](Tape<double>& t) {
          CoSegOutput<double> out = m.forward_two_stage(t, ops::leaf(t, img, false), {});
          return losses::total_loss(out, tg, {}).total_var;
        },
        60, 29);
    ok = ok && res.n_checked >= kGradMinCoords && res.max_rel_err < kGradRelTol;
    detail << fmt("total_loss %.1e/%d ", res.max_rel_err, res.n_checked);
  }

  double dt = seconds_since(t0);
  ok = ok && dt < kGradTimeLimit;
  record(3, "gradient checks (rel err < 1e-4, >= 50 coords each)", ok,
         detail.str() + fmt("- %.1f s (< %.0f s)", dt, kGradTimeLimit));
}

// 4. The reported total loss is the lambda-weighted sum of its four terms.
void criterion_4() {
  CoSegModel<double> m(small_cfg(16));
  Tensor<double> img = rand_image(32, 32, 13);
  Targets<double> tg = rand_targets(32, 32, 2, 14);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  Tape<double> t;
  m.store.set_grads_enabled(false);
  m.store.attach(t);
  CoSegOutput<double> out = m.forward_two_stage(t, ops::leaf(t, img, false), {});
  double worst = 0;
  for (int trial = 0; trial < 8; ++trial) {
    LossWeights w;  // trial 0 keeps the defaults (2, 1)
    if (trial > 0) {
      w.lambda1 = u(rng);
      w.lambda2 = u(rng);
    }
    LossReportT<double> r = losses::total_loss(out, tg, w);
    double manual = w.lambda1 * r.prior_sem + w.lambda2 * r.prior_ins + r.seg_sem + r.seg_ins;
    worst = std::max(worst, std::abs(r.total - manual));
  }
  m.store.set_grads_enabled(true);
  bool ok = worst < kEq8Tol;
  record(4, "loss composition identity (defaults and random weights)", ok,
         fmt("max abs err %.2e (< %.0e)", worst, kEq8Tol));
}

// 5. Two-forward contract: single encode, promptless identity, exact detach,
//    and cross-guidance routing.
void criterion_5() {
  bool ok = true;
  std::ostringstream detail;

  {  // Encoder runs exactly once regardless of prompting.
    CoSegModel<double> m(small_cfg(13));
    Tensor<double> img = rand_image(32, 32, 10);
    for (bool prompts : {true, false}) {
      ForwardOptions opt;
      opt.use_prompts = prompts;
      m.reset_encode_calls();
      Tape<double> t;
      m.store.attach(t);
      m.forward_two_stage(t, ops::leaf(t, img, false), opt);
      ok = ok && m.encode_calls() == 1;
    }
    detail << "encode-once ";
  }

  {  // Zero prompts reproduce the first forward bit-exactly.
    CoSegModel<double> m(small_cfg(14));
    Tensor<double> img = rand_image(32, 32, 11);
    ForwardOptions opt;
    opt.use_prompts = false;
    Tape<double> t;
    m.store.attach(t);
    CoSegOutput<double> out = m.forward_two_stage(t, ops::leaf(t, img, false), opt);
    ok = ok && out.forward2.sem_logits.id == out.forward1.sem_logits.id;
    Var<double> z = m.encoder()(t, m.store, ops::leaf(t, img, false));
    DecoderOutput<double> solo = m.decode_promptless(t, z, 32, 32);
    ok = ok && solo.sem_logits.value().data == out.forward1.sem_logits.value().data;
    detail << "promptless-id ";
  }

  {  // Detach kills the cross-forward gradient exactly; no detach keeps it.
    Tensor<double> img = rand_image(32, 32, 12);
    for (bool detach : {true, false}) {
      CoSegModel<double> m(small_cfg(15));
      ForwardOptions opt;
      opt.detach_between_forwards = detach;
      Tape<double> t;
      m.store.attach(t);
      CoSegOutput<double> out = m.forward_two_stage(t, ops::leaf(t, img, false), opt);
      t.backward(
          ops::add(ops::sum_all(out.forward2.sem_logits), ops::sum_all(out.forward2.hv)).id);
      double g_tis = grad_norm(t, out.forward1.tissue_binary.id);
      double g_nuc = grad_norm(t, out.forward1.nuclei_binary.id);
      if (detach)
        ok = ok && g_tis == 0.0 && g_nuc == 0.0;
      else
        ok = ok && g_tis > 1e-10 && g_nuc > 1e-10;
    }
    detail << "detach-exact ";
  }

  {  // Cross-guidance routes each head to the other task's prompt.
    CoSegModel<double> m(small_cfg(12));
    std::mt19937_64 rng(9);
    Tensor<double> img = rand_image(32, 32, 8);
    for (bool cross : {true, false}) {
      Tape<double> t;
      m.store.set_grads_enabled(false);
      m.store.attach(t);
      Var<double> z = m.encode(t, ops::leaf(t, img, false));
      Var<double> gt_prompt = ops::leaf(t, Tensor<double>::randn(z.shape(), rng, 0.5), true);
      Var<double> gn_prompt = ops::leaf(t, Tensor<double>::randn(z.shape(), rng, 0.5), true);
      DecoderOutput<double> out =
          m.decoder().decode(t, m.store, z, gt_prompt, gn_prompt, 32, 32, cross);
      t.backward(ops::sum_all(out.sem_logits).id);
      double from_tissue = grad_norm(t, gt_prompt.id);
      double from_nuclei = grad_norm(t, gn_prompt.id);
      if (cross)
        ok = ok && from_nuclei > 1e-8 && from_tissue == 0.0;
      else
        ok = ok && from_tissue > 1e-8 && from_nuclei == 0.0;
      m.store.set_grads_enabled(true);
    }
    detail << "cross-routing";
  }

  record(5, "two-forward contract", ok, detail.str());
}

// 6. Instance matching, AJI, PQ and Hausdorff against independent references.
void criterion_6() {
  using namespace coseg::metrics;
  bool ok = true;
  double worst_iou = 0, worst_aji = 0;
  int mismatched_pairs = 0;
  for (int i = 0; i < kMetricPairs; ++i) {
    LabelMap gt = random_instances(32, 32, 4000 + i);
    LabelMap pred = perturb(gt, 6000 + i);
    MatchResult lib = match_instances(pred, gt);
    MatchResult ref = brute_match(pred, gt);
    auto key = [](const MatchResult& m) {
      std::vector<std::pair<std::int32_t, std::int32_t>> p = m.pairs;
      std::sort(p.begin(), p.end());
      return p;
    };
    if (key(lib) != key(ref) || lib.n_pred != ref.n_pred || lib.n_gt != ref.n_gt)
      ++mismatched_pairs;
    std::vector<double> li = lib.ious, ri = ref.ious;
    std::sort(li.begin(), li.end());
    std::sort(ri.begin(), ri.end());
    if (li.size() == ri.size())
      for (std::size_t k = 0; k < li.size(); ++k)
        worst_iou = std::max(worst_iou, std::abs(li[k] - ri[k]));
    worst_aji = std::max(worst_aji, std::abs(aji(pred, gt) - brute_aji(pred, gt)));
  }
  ok = ok && mismatched_pairs == 0 && worst_iou < kExactTol && worst_aji < kExactTol;

  // PQ fixture: one IoU-0.6 match plus one missed instance.
  LabelMap gt = make_map(10, 10), pred = make_map(10, 10);
  for (int x = 0; x < 10; ++x) gt.ids[x] = 1;   // 10 px instance
  for (int x = 0; x < 6; ++x) pred.ids[x] = 1;  // covers 6 of them: IoU 0.6
  for (int x = 0; x < 4; ++x) gt.at(5, x) = 2;  // unmatched gt instance
  PanopticResult pq = panoptic_quality(pred, gt);
  double pq_err = std::abs(pq.pq - 40.0);
  ok = ok && pq_err < kPqFixtureTol;

  // Hausdorff fixtures with known exact values.
  LabelMap a = make_map(16, 16), b = make_map(16, 16);
  a.at(0, 0) = 1;
  b.at(3, 4) = 1;  // 3-4-5 triangle
  double h1 = hausdorff_binary(a, b);
  LabelMap outer = make_map(16, 16), inner = make_map(16, 16);
  for (int y = 4; y <= 10; ++y)
    for (int x = 4; x <= 10; ++x) outer.at(y, x) = 1;
  for (int y = 6; y <= 8; ++y)
    for (int x = 6; x <= 8; ++x) inner.at(y, x) = 1;
  double h2 = hausdorff_binary(outer, inner);
  LabelMap empty = make_map(16, 16);
  double h3 = hausdorff_binary(empty, empty);
  double h4 = hausdorff_binary(a, empty);
  double diag = std::sqrt(15.0 * 15 + 15 * 15);
  ok = ok && h1 == 5.0 && h2 == std::sqrt(8.0) && h3 == 0.0 && h4 == diag;

  record(6, "metric oracles vs brute force", ok,
         fmt("%d pair mismatches, worst IoU dev %.1e, worst AJI dev %.1e, PQ err %.1e",
             mismatched_pairs, worst_iou, worst_aji, pq_err));
}

// 7. Watershed recovery from clean binary + HV inputs.
void criterion_7() {
  using namespace coseg::postproc;
  SynthConfig cfg;
  cfg.H = cfg.W = 128;
  cfg.seed = 7;
  double iou_sum = 0;
  long iou_n = 0, gt_total = 0, pred_total = 0;
  for (int i = 0; i < kRecoverySamples; ++i) {
    ImageSample s = synth::generate_sample(cfg, i);
    HVMaps hv = synth::hv_targets(s.instance);
    std::vector<float> prob(s.instance.ids.size());
    for (std::size_t k = 0; k < prob.size(); ++k) prob[k] = s.instance.ids[k] ? 1.f : 0.f;
    LabelMap rec = instances_from_hv(prob, hv);
    metrics::MatchResult m = metrics::match_instances(rec, s.instance);
    gt_total += m.n_gt;
    pred_total += m.n_pred;
    for (double v : m.ious) {
      iou_sum += v;
      ++iou_n;
    }
  }
  double mean_iou = iou_n ? iou_sum / iou_n : 0;
  double count_err =
      gt_total ? std::abs(static_cast<double>(pred_total) - gt_total) / gt_total : 1.0;

  // Touching pair: one connected blob must split into two instances.
  LabelMap inst = make_map(32, 32);
  stamp_disc(inst, 16, 11, 5.0, 1);
  stamp_disc(inst, 16, 20, 5.0, 2);
  LabelMap fgmask = inst;
  for (auto& id : fgmask.ids) id = id != 0;
  bool one_blob = count_ids(connected_components(fgmask)) == 1;
  HVMaps hv = synth::hv_targets(inst);
  std::vector<float> prob(inst.ids.size());
  for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = inst.ids[i] ? 1.f : 0.f;
  bool split = count_ids(instances_from_hv(prob, hv)) == 2;

  bool ok = mean_iou >= kRecoveryMinIoU && count_err <= kRecoveryMaxCountErr && one_blob && split;
  record(7, "instance recovery from clean inputs", ok,
         fmt("mean matched IoU %.3f (>= %.2f), count err %.3f (<= %.2f), touching pair %s",
             mean_iou, kRecoveryMinIoU, count_err, kRecoveryMaxCountErr,
             split ? "split" : "NOT split"));
}

// 9. Parameter-efficient fine-tuning contract.
void criterion_9() {
  bool ok = true;
  std::ostringstream detail;

  {  // Attaching adapters/LoRA must not change the function at init.
    ModelConfig cfg = small_cfg(7);
    CoSegModel<double> base(cfg);
    cfg.use_peft = true;
    CoSegModel<double> peft(cfg);
    Tensor<double> img = rand_image(32, 32, 3);
    Tape<double> t1, t2;
    base.store.attach(t1);
    peft.store.attach(t2);
    CoSegOutput<double> o1 = base.forward_two_stage(t1, ops::leaf(t1, img, false), {});
    CoSegOutput<double> o2 = peft.forward_two_stage(t2, ops::leaf(t2, img, false), {});
    bool preserved = o1.forward2.sem_logits.value().data == o2.forward2.sem_logits.value().data &&
                     o1.forward2.hv.value().data == o2.forward2.hv.value().data;
    ok = ok && preserved;
    detail << (preserved ? "output-preserving " : "NOT output-preserving ");
  }

  {  // Frozen base stays bit-identical through real training steps.
    ModelConfig mc = small_cfg(8);
    mc.dec.n_classes = 3;
    mc.use_peft = true;
    mc.enc.freeze_base = true;
    CoSegModel<float> m(mc);
    std::vector<Tensor<float>> frozen;
    for (const auto& p : m.store.all())
      if (!p.trainable) frozen.push_back(p.value);
    SynthConfig sc;
    sc.H = sc.W = 32;
    sc.seed = 9;
    std::vector<ImageSample> samples;
    for (int i = 0; i < 4; ++i) samples.push_back(synth::generate_sample(sc, i));
    std::vector<const ImageSample*> pp;
    for (const auto& s : samples) pp.push_back(&s);
    train::TrainConfig cfg;
    cfg.lr = 3e-4;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.eval_every = 0;
    train::fit(m, pp, {}, cfg);
    std::size_t k = 0;
    bool identical = true;
    for (const auto& p : m.store.all())
      if (!p.trainable) identical = identical && p.value.data == frozen[k++].data;
    ok = ok && !frozen.empty() && identical;
    detail << (identical ? "base-frozen " : "base MOVED ");
  }

  {  // Trainable fraction of the deployment-size frozen encoder.
    ModelConfig cfg = deploy_cfg();
    cfg.use_peft = true;
    cfg.enc.freeze_base = true;
    CoSegModel<double> m(cfg);
    std::int64_t enc_total = 0, enc_train = 0;
    for (const auto& p : m.store.all()) {
      if (p.name.rfind("enc.", 0) != 0) continue;
      enc_total += p.value.size();
      if (p.trainable) enc_train += p.value.size();
    }
    double frac = enc_total ? static_cast<double>(enc_train) / enc_total : 1.0;
    ok = ok && enc_train > 0 && frac < kPeftMaxTrainableFrac;
    detail << fmt("trainable fraction %.3f (< %.2f)", frac, kPeftMaxTrainableFrac);
  }

  record(9, "parameter-efficient fine-tuning contract", ok, detail.str());
}

// 10. Determinism: datasets, training and evaluation reproduce bit-for-bit
//     (losses to 1e-6) under a fixed seed.
void criterion_10() {
  bool ok = true;
  std::ostringstream detail;

  {  // Identical datasets.
    SynthConfig sc;
    sc.H = sc.W = 64;
    sc.seed = 21;
    bool same = true;
    for (int i = 0; i < 8; ++i) {
      ImageSample a = synth::generate_sample(sc, i);
      ImageSample b = synth::generate_sample(sc, i);
      same = same && a.semantic.ids == b.semantic.ids && a.instance.ids == b.instance.ids &&
             a.image.rgb == b.image.rgb;
    }
    ok = ok && same;
    detail << (same ? "datasets " : "datasets DIFFER ");
  }

  SynthConfig sc;
  sc.H = sc.W = 32;
  sc.seed = 5;
  std::vector<ImageSample> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(synth::generate_sample(sc, i));
  std::vector<const ImageSample*> pp;
  for (const auto& s : samples) pp.push_back(&s);

  {  // Identical training losses.
    train::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 4;
    cfg.eval_every = 0;
    double worst = 0;
    ModelConfig mc = small_cfg(3);
    mc.dec.n_classes = 3;  // the synthetic set has three tissue classes
    CoSegModel<float> m1(mc), m2(mc);
    auto r1 = train::fit(m1, pp, {}, cfg);
    auto r2 = train::fit(m2, pp, {}, cfg);
    for (std::size_t e = 0; e < r1.log.size(); ++e)
      worst = std::max(worst, std::abs(r1.log[e].total - r2.log[e].total));
    ok = ok && r1.log.size() == r2.log.size() && worst < kTrainLossTol;
    detail << fmt("train dloss %.1e ", worst);

    // Identical evaluation reports from the two identically-trained models.
    train::EvalReport e1 = train::evaluate(m1, pp, "train", {});
    train::EvalReport e2 = train::evaluate(m2, pp, "train", {});
    bool same_eval = train::eval_report_json(e1) == train::eval_report_json(e2);
    ok = ok && same_eval;
    detail << (same_eval ? "eval reports identical" : "eval reports DIFFER");
  }

  record(10, "determinism under fixed seeds", ok, detail.str());
}

// 8. Directional ablation on the coupled synthetic dataset. On this data the
//    tissue class is cued by nuclei density rather than color, so prompting
//    and cross-guidance must buy real accuracy.
void criterion_8() {
  using namespace coseg::train;
  auto t0 = Clock::now();

  SynthConfig sc;
  sc.H = sc.W = 256;
  sc.seed = 5;
  sc.class_contrast = 0.0;  // density is the only class cue
  sc.radius_min = 6.0;      // nuclei must outsize the stride-16 prompt grid
  sc.radius_max = 12.0;
  sc.nuclei_density_per_class = {0.8, 0.25, 0.04};
  sc.distractor_density = 0.6;  // unlabeled look-alikes in the background
  const int n_total = 285;  // 7:1:2 split -> 200 train / 28 val / 57 test

  fs::path dir = fs::temp_directory_path() / "coseg_acceptance_coupled";
  fs::remove_all(dir);
  synth::generate_dataset(sc, n_total, dir.string());
  Dataset ds = synth::ingest_folder(dir.string());
  auto train_s = ds.split("train");
  auto val_s = ds.split("val");
  auto test_s = ds.split("test");
  bool sized = static_cast<int>(train_s.size()) == kAblTrainImages;

  TrainConfig tc;
  tc.lr = 3e-4;
  tc.lr_decay = 0.98;
  tc.epochs = kAblEpochs;
  tc.batch_size = 2;
  tc.seed = 0;
  tc.eval_every = 0;
  AblationTable table = ablate(train_s, val_s, test_s, ablation_cfg(), tc, kAblSeeds);

  std::printf("%s\n", ablation_text(table).c_str());
  std::fflush(stdout);

  // Column 0 is Dice, column 3 is F1; row 0 is the baseline, row 3 the full
  // prompted + detached + cross-guided model.
  double base_dice = table.rows.front().cells[0].mean;
  double full_dice = table.rows.back().cells[0].mean;
  double base_f1 = table.rows.front().cells[3].mean;
  double full_f1 = table.rows.back().cells[3].mean;
  double dt = seconds_since(t0);

  bool ok = sized && table.rows.size() == 4 && full_dice >= base_dice && full_f1 >= base_f1 &&
            (full_dice - base_dice) >= kAblMinDiceGap && dt < kAblTimeLimit;
  record(8, "directional ablation on the coupled dataset", ok,
         fmt("Dice %.2f -> %.2f (gap %.2f, need >= %.1f), F1 %.2f -> %.2f, %.0f s (< %.0f s)",
             base_dice, full_dice, full_dice - base_dice, kAblMinDiceGap, base_f1, full_f1, dt,
             kAblTimeLimit));
  fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  // --fast skips the multi-hour ablation criterion (it is then reported as
  // skipped and counted as a failure, so the full gate still requires it).
  bool fast = argc > 1 && std::string(argv[1]) == "--fast";
  std::fprintf(stderr, "acceptance: running fast criteria...\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_9();
  criterion_10();
  if (fast) {
    record(8, "directional ablation on the coupled dataset", false, "skipped (--fast)");
  } else {
    std::fprintf(stderr, "acceptance: running the ablation (slow)...\n");
    criterion_8();
  }

  std::sort(g_results.begin(), g_results.end(),
            [](const CriterionResult& a, const CriterionResult& b) { return a.id < b.id; });
  int failures = 0;
  std::printf("\n");
  for (const auto& r : g_results) {
    std::printf("[%s] criterion %2d: %s — %s\n", r.pass ? "PASS" : "FAIL", r.id,
                r.title.c_str(), r.detail.c_str());
    failures += !r.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(g_results.size()) - failures,
              g_results.size());
  return failures;
}
