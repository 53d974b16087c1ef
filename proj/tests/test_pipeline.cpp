#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "coseg/pipeline.hpp"

using namespace coseg;
using namespace coseg::train;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg(int seed = 0) {
  ModelConfig cfg;
  cfg.enc.stage_depths = {1, 1, 1};
  cfg.enc.stage_widths = {8, 12, 16};
  cfg.enc.window_size = 2;
  cfg.dec.width = 16;
  cfg.dec.n_classes = 3;
  cfg.rp_hidden = 8;
  cfg.seed = seed;
  return cfg;
}

std::vector<ImageSample> tiny_samples(int n, int seed = 0) {
  SynthConfig sc;
  sc.H = sc.W = 32;
  sc.seed = seed;
  std::vector<ImageSample> out;
  for (int i = 0; i < n; ++i) out.push_back(synth::generate_sample(sc, i));
  return out;
}

std::vector<const ImageSample*> ptrs(const std::vector<ImageSample>& v) {
  std::vector<const ImageSample*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

}  // namespace

TEST_CASE("learning rate decays geometrically") {
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.lr_decay = 0.5;
  CHECK(lr_at_epoch(cfg, 0) == doctest::Approx(0.01));
  CHECK(lr_at_epoch(cfg, 3) == doctest::Approx(0.00125));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.lr = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.forward.use_prompts = false;
  bad.forward.cross_guidance = true;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.forward.cross_guidance = false;
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("adam step matches a scalar reference and skips frozen parameters") {
  ParamStore<float> ps;
  std::mt19937_64 rng(1);
  int a = ps.add("a", Tensor<float>::randn({3}, rng, 1.f), true);
  int b = ps.add("b", Tensor<float>::randn({2}, rng, 1.f), false);  // frozen
  Tensor<float> frozen_before = ps.at(b).value;

  // Independent double-precision Adam recurrence.
  std::vector<double> theta(3), m(3, 0), v(3, 0);
  for (int j = 0; j < 3; ++j) theta[j] = ps.at(a).value[j];

  Adam opt(ps);
  std::vector<std::vector<float>> g{{0.3f, -0.7f, 1.1f}, {1.f, 1.f}};
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= 5; ++step) {
    opt.step(ps, g, lr);
    for (int j = 0; j < 3; ++j) {
      double gj = g[0][j];
      m[j] = (float)(b1 * m[j] + (1 - b1) * gj);
      v[j] = (float)(b2 * v[j] + (1 - b2) * gj * gj);
      double mh = m[j] / (1 - std::pow(b1, step));
      double vh = v[j] / (1 - std::pow(b2, step));
      theta[j] -= (float)(lr * mh / (std::sqrt(vh) + eps));
      CHECK(ps.at(a).value[j] == doctest::Approx(theta[j]).epsilon(1e-6));
    }
  }
  CHECK(opt.steps() == 5);
  CHECK(ps.at(b).value.data == frozen_before.data);  // untouched
}

TEST_CASE("targets_from_sample agrees with the generator targets") {
  auto samples = tiny_samples(3, 21);
  for (const auto& s : samples) {
    Targets<float> tg = targets_from_sample(s, 3);
    LabelMap tfg, nfg;
    synth::binary_targets(s, tfg, nfg);
    HVMaps hv = synth::hv_targets(s.instance);
    for (std::size_t i = 0; i < tfg.ids.size(); ++i) {
      CHECK(tg.tissue_fg[i] == static_cast<float>(tfg.ids[i]));
      CHECK(tg.nuclei_fg[i] == static_cast<float>(nfg.ids[i]));
      CHECK((*tg.semantic)[i] == s.semantic.ids[i]);
      CHECK(tg.hv[2 * i] == hv.h[i]);
      CHECK(tg.hv[2 * i + 1] == hv.v[i]);
    }
  }
  ImageSample bad = samples[0];
  bad.semantic.ids[0] = 9;
  CHECK_THROWS_AS(targets_from_sample(bad, 3), std::invalid_argument);
}

TEST_CASE("checkpoint roundtrip restores parameters bit-exactly") {
  fs::path dir = fs::temp_directory_path() / "coseg_ckpt_test";
  fs::create_directories(dir);
  std::string path = (dir / "m.ckpt").string();

  CoSegModel<float> m(tiny_cfg(4));
  std::vector<Tensor<float>> orig;
  for (const auto& p : m.store.all()) orig.push_back(p.value);
  save_checkpoint(path, m.store, "{\"epoch\": 7}");

  // Scramble, then restore.
  std::mt19937_64 rng(9);
  for (auto& p : m.store.all()) p.value = Tensor<float>::randn(p.value.shape, rng, 1.f);
  std::string meta = load_checkpoint(path, m.store);
  CHECK(meta.find("\"epoch\"") != std::string::npos);
  for (int i = 0; i < m.store.count(); ++i)
    CHECK(m.store.at(i).value.data == orig[i].data);

  // A differently-shaped model must be rejected.
  CoSegModel<float> other(tiny_cfg(4));
  other.store.add("extra", Tensor<float>::zeros({2}));
  CHECK_THROWS(load_checkpoint(path, other.store));
  CHECK_THROWS(load_checkpoint((dir / "missing.ckpt").string(), m.store));
  fs::remove_all(dir);
}

TEST_CASE("fit runs, logs every epoch and lowers the training loss") {
  auto samples = tiny_samples(6, 5);
  CoSegModel<float> m(tiny_cfg(5));
  TrainConfig cfg;
  cfg.lr = 3e-4;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  cfg.eval_every = 0;
  TrainResult r = fit(m, ptrs(samples), {}, cfg);
  REQUIRE(r.log.size() == 4);
  CHECK(r.log.front().epoch == 0);
  CHECK(r.log.back().epoch == 3);
  CHECK(r.log.back().total < r.log.front().total);
  for (const auto& el : r.log) {
    CHECK(el.total > 0);
    CHECK(el.prior_sem > 0);  // prompts are on by default
  }
}

TEST_CASE("training is deterministic in the seed") {
  auto samples = tiny_samples(4, 6);
  TrainConfig cfg;
  cfg.lr = 3e-4;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.eval_every = 0;
  cfg.seed = 3;

  CoSegModel<float> m1(tiny_cfg(7)), m2(tiny_cfg(7));
  TrainResult r1 = fit(m1, ptrs(samples), {}, cfg);
  TrainResult r2 = fit(m2, ptrs(samples), {}, cfg);
  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    CHECK(std::abs(r1.log[i].total - r2.log[i].total) < 1e-6);
  for (int i = 0; i < m1.store.count(); ++i)
    CHECK(m1.store.at(i).value.data == m2.store.at(i).value.data);

  // A different shuffle seed must actually change the trajectory.
  CoSegModel<float> m3(tiny_cfg(7));
  TrainConfig other = cfg;
  other.seed = 4;
  TrainResult r3 = fit(m3, ptrs(samples), {}, other);
  bool differs = false;
  for (std::size_t i = 0; i < r1.log.size(); ++i)
    differs = differs || std::abs(r1.log[i].total - r3.log[i].total) > 1e-12;
  CHECK(differs);
}

TEST_CASE("freeze_base keeps the frozen encoder bits identical through training") {
  ModelConfig mc = tiny_cfg(8);
  mc.use_peft = true;
  mc.enc.freeze_base = true;
  CoSegModel<float> m(mc);
  std::vector<std::pair<std::string, Tensor<float>>> base;
  for (const auto& p : m.store.all())
    if (!p.trainable) base.push_back({p.name, p.value});
  REQUIRE(!base.empty());

  auto samples = tiny_samples(4, 9);
  TrainConfig cfg;
  cfg.lr = 3e-4;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.eval_every = 0;
  fit(m, ptrs(samples), {}, cfg);

  std::size_t k = 0;
  bool peft_moved = false;
  for (const auto& p : m.store.all()) {
    if (!p.trainable) {
      CHECK(p.value.data == base[k++].second.data);
    } else if (p.name.find(".lora") != std::string::npos ||
               p.name.find(".adapter") != std::string::npos) {
      bool same = true;
      for (std::int64_t j = 0; j < p.value.size() && same; ++j) same = p.value[j] == 0.f;
      peft_moved = peft_moved || !same;
    }
  }
  CHECK(k == base.size());
  CHECK(peft_moved);
}

TEST_CASE("fit writes artifacts and resume continues the epoch count") {
  fs::path dir = fs::temp_directory_path() / "coseg_fit_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto samples = tiny_samples(4, 10);
  auto val = tiny_samples(2, 11);

  CoSegModel<float> m(tiny_cfg(9));
  TrainConfig cfg;
  cfg.lr = 3e-4;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.eval_every = 1;
  cfg.out_dir = dir.string();
  TrainResult r = fit(m, ptrs(samples), ptrs(val), cfg);
  CHECK(fs::exists(dir / "train_log.csv"));
  CHECK(fs::exists(dir / "last.ckpt"));
  CHECK(!r.checkpoint_path.empty());
  CHECK(r.best_val_dice > -1);

  TrainConfig more = cfg;
  more.epochs = 1;
  more.resume_from = (dir / "last.ckpt").string();
  CoSegModel<float> m2(tiny_cfg(9));
  TrainResult r2 = fit(m2, ptrs(samples), ptrs(val), more);
  REQUIRE(r2.log.size() == 1);
  CHECK(r2.log[0].epoch == 2);  // continues after the stored epoch
  fs::remove_all(dir);
}

TEST_CASE("predict emits full-resolution maps with valid contents") {
  auto samples = tiny_samples(1, 12);
  CoSegModel<float> m(tiny_cfg(10));
  Prediction p = predict(m, samples[0].image, {});
  CHECK(p.semantic.H == 32);
  CHECK(p.semantic.W == 32);
  for (auto c : p.semantic.ids) {
    CHECK(c >= 0);
    CHECK(c <= 3);
  }
  CHECK(p.nuclei_prob.size() == 32u * 32u);
  for (float v : p.nuclei_prob) {
    CHECK(v >= 0.f);
    CHECK(v <= 1.f);
  }
  CHECK(p.hv.h.size() == 32u * 32u);
  CHECK(p.instance.H == 32);
}

TEST_CASE("oracle-injected evaluation is perfect on every metric") {
  auto samples = tiny_samples(5, 13);
  CoSegModel<float> m(tiny_cfg(11));
  EvalReport r = evaluate(m, ptrs(samples), "test", {}, true);
  CHECK(r.n_images == 5);
  CHECK(r.tissue.dice == doctest::Approx(100.0));
  CHECK(r.tissue.miou == doctest::Approx(100.0));
  CHECK(r.tissue.hd == doctest::Approx(0.0));
  CHECK(r.nuclei.f1 == doctest::Approx(100.0));
  CHECK(r.nuclei.aji == doctest::Approx(1.0));
  CHECK(r.nuclei.pq == doctest::Approx(100.0));
  std::string js = eval_report_json(r);
  CHECK(js.find("\"per_image\"") != std::string::npos);
  CHECK(js.find("\"split\"") != std::string::npos);
}

TEST_CASE("evaluation reports are reproducible") {
  auto samples = tiny_samples(3, 14);
  CoSegModel<float> m(tiny_cfg(12));
  EvalReport a = evaluate(m, ptrs(samples), "val", {});
  EvalReport b = evaluate(m, ptrs(samples), "val", {});
  CHECK(eval_report_json(a) == eval_report_json(b));
}

TEST_CASE("ablation ladder spells out the four variants") {
  auto ladder = ablation_ladder();
  REQUIRE(ladder.size() == 4);
  CHECK(ladder[0].label == "Baseline");
  CHECK(!ladder[0].forward.use_prompts);
  CHECK(ladder[1].label == "+P");
  CHECK(ladder[1].forward.use_prompts);
  CHECK(!ladder[1].forward.cross_guidance);
  CHECK(ladder[2].label == "+P+D");
  CHECK(ladder[2].forward.cross_guidance);
  CHECK(ladder[2].forward.detach_between_forwards);
  CHECK(ladder[3].label == "+P+D+C");
  CHECK(!ladder[3].forward.detach_between_forwards);
  for (const auto& v : ladder) {
    TrainConfig cfg;
    cfg.forward = v.forward;
    CHECK_NOTHROW(cfg.validate());
  }
}

TEST_CASE("ablation table formatting") {
  AblationTable t;
  t.columns = {"Dice", "F1"};
  AblationRow r;
  r.label = "Baseline";
  r.cells = {{80.126, 0.5}, {70.0, 1.25}};
  t.rows.push_back(r);
  std::string csv = ablation_csv(t);
  CHECK(csv.find("Variant,Dice,Dice std,F1,F1 std") == 0);
  CHECK(csv.find("Baseline,80.126,0.5,70,1.25") != std::string::npos);
  std::string txt = ablation_text(t);
  CHECK(txt.find("80.13±0.50") != std::string::npos);
}
