#include "coseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace coseg::train {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (lr <= 0) throw std::invalid_argument("train: lr must be positive");
  if (lr_decay <= 0 || lr_decay > 1)
    throw std::invalid_argument("train: lr_decay must be in (0, 1]");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be at least 1");
  if (eval_every < 0) throw std::invalid_argument("train: eval_every must be nonnegative");
  if (!forward.use_prompts && forward.cross_guidance)
    throw std::invalid_argument("train: cross_guidance requires use_prompts");
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  return cfg.lr * std::pow(cfg.lr_decay, epoch);
}

Adam::Adam(const ParamStore<float>& ps, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(ps.count());
  v_.resize(ps.count());
  for (int i = 0; i < ps.count(); ++i) {
    m_[i].assign(ps.at(i).value.size(), 0.f);
    v_[i].assign(ps.at(i).value.size(), 0.f);
  }
}

void Adam::step(ParamStore<float>& ps, const std::vector<std::vector<float>>& grad, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (int i = 0; i < ps.count(); ++i) {
    auto& p = ps.at(i);
    if (!p.trainable) continue;
    for (std::int64_t j = 0; j < p.value.size(); ++j) {
      double g = grad[i][j];
      double m = m_[i][j] = static_cast<float>(beta1_ * m_[i][j] + (1.0 - beta1_) * g);
      double v = v_[i][j] = static_cast<float>(beta2_ * v_[i][j] + (1.0 - beta2_) * g * g);
      p.value[j] -= static_cast<float>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps_));
    }
  }
}

Targets<float> targets_from_sample(const ImageSample& s, int n_classes) {
  Targets<float> tg;
  tg.H = s.semantic.H;
  tg.W = s.semantic.W;
  tg.K = n_classes;
  tg.semantic = std::make_shared<std::vector<int>>(s.semantic.ids.size());
  for (std::size_t i = 0; i < s.semantic.ids.size(); ++i) {
    int v = s.semantic.ids[i];
    if (v < 0 || v > n_classes)
      throw std::invalid_argument("targets: semantic label out of range for sample " + s.id);
    (*tg.semantic)[i] = v;
  }
  tg.tissue_fg = Tensor<float>::zeros({tg.H, tg.W, 1});
  tg.nuclei_fg = Tensor<float>::zeros({tg.H, tg.W, 1});
  for (std::size_t i = 0; i < s.semantic.ids.size(); ++i) {
    tg.tissue_fg[i] = s.semantic.ids[i] > 0 ? 1.f : 0.f;
    tg.nuclei_fg[i] = s.instance.ids[i] > 0 ? 1.f : 0.f;
  }
  HVMaps hv = synth::hv_targets(s.instance);
  tg.hv = Tensor<float>::zeros({tg.H, tg.W, 2});
  for (std::size_t i = 0; i < hv.h.size(); ++i) {
    tg.hv[2 * i] = hv.h[i];
    tg.hv[2 * i + 1] = hv.v[i];
  }
  return tg;
}

namespace {

Tensor<float> image_tensor(const Image& img) {
  Tensor<float> t({img.H, img.W, 3});
  std::copy(img.rgb.begin(), img.rgb.end(), t.data.begin());
  return t;
}

LabelMap argmax_semantic(const Tensor<float>& logits, int H, int W, int K1) {
  LabelMap m;
  m.H = H;
  m.W = W;
  m.ids.resize(static_cast<std::size_t>(H) * W);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m.ids.size()); ++i) {
    const float* row = logits.ptr() + i * K1;
    int best = 0;
    for (int c = 1; c < K1; ++c)
      if (row[c] > row[best]) best = c;
    m.ids[i] = best;
  }
  return m;
}

// Macro Dice over the tissue classes present in prediction or ground truth.
double tissue_dice(const LabelMap& pred, const LabelMap& gt, int n_classes) {
  double sum = 0;
  int counted = 0;
  for (int c = 1; c <= n_classes; ++c) {
    std::int64_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
      bool p = pred.ids[i] == c, g = gt.ids[i] == c;
      inter += p && g;
      a += p;
      b += g;
    }
    if (a + b == 0) continue;
    sum += 100.0 * 2.0 * inter / static_cast<double>(a + b);
    ++counted;
  }
  return counted == 0 ? 100.0 : sum / counted;
}

LabelMap fg_mask(const LabelMap& m) {
  LabelMap out = m;
  for (auto& v : out.ids) v = v != 0;
  return out;
}

ImageScores score_pair(const std::string& id, const LabelMap& sem_pred, const LabelMap& ins_pred,
                       const ImageSample& gt, int n_classes) {
  ImageScores s;
  s.id = id;
  s.tissue.dice = tissue_dice(sem_pred, gt.semantic, n_classes);
  s.tissue.miou = metrics::miou_multiclass(sem_pred, gt.semantic, n_classes);
  s.tissue.hd = metrics::hausdorff_binary(fg_mask(sem_pred), fg_mask(gt.semantic));
  metrics::PanopticResult tp = metrics::tissue_panoptic(sem_pred, gt.semantic, n_classes);
  s.tissue.pq = tp.pq;
  s.tissue.dq = tp.dq;
  s.tissue.sq = tp.sq;

  metrics::MatchResult m = metrics::match_instances(ins_pred, gt.instance);
  metrics::DetectionPRF prf = metrics::detection_prf(m);
  s.nuclei.f1 = prf.f1;
  s.nuclei.precision = prf.precision;
  s.nuclei.recall = prf.recall;
  s.nuclei.aji = metrics::aji(ins_pred, gt.instance);
  s.nuclei.dice = metrics::dice_binary(fg_mask(ins_pred), fg_mask(gt.instance));
  s.nuclei.hd = metrics::hausdorff_binary(fg_mask(ins_pred), fg_mask(gt.instance));
  metrics::PanopticResult np = metrics::panoptic_quality(ins_pred, gt.instance);
  s.nuclei.pq = np.pq;
  s.nuclei.dq = np.dq;
  s.nuclei.sq = np.sq;
  return s;
}

void accumulate(TaskScores& acc, const TaskScores& s) {
  acc.dice += s.dice;
  acc.miou += s.miou;
  acc.hd += s.hd;
  acc.f1 += s.f1;
  acc.precision += s.precision;
  acc.recall += s.recall;
  acc.aji += s.aji;
  acc.pq += s.pq;
  acc.dq += s.dq;
  acc.sq += s.sq;
}

void divide(TaskScores& acc, double n) {
  acc.dice /= n;
  acc.miou /= n;
  acc.hd /= n;
  acc.f1 /= n;
  acc.precision /= n;
  acc.recall /= n;
  acc.aji /= n;
  acc.pq /= n;
  acc.dq /= n;
  acc.sq /= n;
}

json task_json(const TaskScores& s, bool tissue) {
  if (tissue)
    return {{"dice", s.dice}, {"miou", s.miou}, {"hd", s.hd},
            {"pq", s.pq},     {"dq", s.dq},     {"sq", s.sq}};
  return {{"f1", s.f1}, {"precision", s.precision}, {"recall", s.recall},
          {"aji", s.aji}, {"pq", s.pq}, {"dq", s.dq}, {"sq", s.sq}};
}

}  // namespace

Prediction predict(CoSegModel<float>& model, const Image& img, const ForwardOptions& opt,
                   const postproc::Thresholds& th) {
  model.store.set_grads_enabled(false);
  Tape<float> t;
  model.store.attach(t);
  Var<float> x = ops::constant(t, image_tensor(img));
  CoSegOutput<float> out = model.forward_two_stage(t, x, opt);
  model.store.set_grads_enabled(true);

  const int H = img.H, W = img.W;
  const int K1 = model.config().dec.n_classes + 1;
  Prediction p;
  p.semantic = argmax_semantic(out.forward2.sem_logits.value(), H, W, K1);

  const Tensor<float>& nb = out.forward2.nuclei_binary.value();
  p.nuclei_prob.resize(nb.size());
  for (std::int64_t i = 0; i < nb.size(); ++i)
    p.nuclei_prob[i] = 1.f / (1.f + std::exp(-nb[i]));

  const Tensor<float>& hv = out.forward2.hv.value();
  p.hv.H = H;
  p.hv.W = W;
  p.hv.h.resize(static_cast<std::size_t>(H) * W);
  p.hv.v.resize(static_cast<std::size_t>(H) * W);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(p.hv.h.size()); ++i) {
    p.hv.h[i] = hv[2 * i];
    p.hv.v[i] = hv[2 * i + 1];
  }
  p.instance = postproc::instances_from_hv(p.nuclei_prob, p.hv, th);
  return p;
}

EvalReport evaluate(CoSegModel<float>& model, const std::vector<const ImageSample*>& samples,
                    const std::string& split, const ForwardOptions& opt, bool oracle_inject,
                    const postproc::Thresholds& th) {
  EvalReport r;
  r.split = split;
  r.n_images = static_cast<int>(samples.size());
  const int K = model.config().dec.n_classes;
  for (const ImageSample* s : samples) {
    ImageScores is;
    if (oracle_inject) {
      is = score_pair(s->id, s->semantic, s->instance, *s, K);
    } else {
      Prediction p = predict(model, s->image, opt, th);
      is = score_pair(s->id, p.semantic, p.instance, *s, K);
    }
    accumulate(r.tissue, is.tissue);
    accumulate(r.nuclei, is.nuclei);
    r.per_image.push_back(std::move(is));
  }
  if (!samples.empty()) {
    divide(r.tissue, static_cast<double>(samples.size()));
    divide(r.nuclei, static_cast<double>(samples.size()));
  }
  return r;
}

std::string eval_report_json(const EvalReport& r) {
  json j;
  j["split"] = r.split;
  j["n_images"] = r.n_images;
  j["tissue"] = task_json(r.tissue, true);
  j["nuclei"] = task_json(r.nuclei, false);
  json per = json::array();
  for (const auto& s : r.per_image)
    per.push_back({{"id", s.id},
                   {"tissue", task_json(s.tissue, true)},
                   {"nuclei", task_json(s.nuclei, false)}});
  j["per_image"] = per;
  return j.dump(2);
}

void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                     const std::string& meta_json) {
  json header;
  header["meta"] = meta_json.empty() ? json(json::object()) : json::parse(meta_json);
  json params = json::array();
  for (const auto& p : ps.all())
    params.push_back({{"name", p.name}, {"shape", p.value.shape}});
  header["params"] = params;
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  const char magic[8] = {'C', 'O', 'S', 'E', 'G', 'C', 'K', '1'};
  f.write(magic, 8);
  std::uint64_t n = hs.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : ps.all())
    f.write(reinterpret_cast<const char*>(p.value.ptr()),
            static_cast<std::streamsize>(p.value.size() * sizeof(float)));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::string load_checkpoint(const std::string& path, ParamStore<float>& ps) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "COSEGCK1", 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 8);
  std::string hs(n, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(n));
  json header = json::parse(hs);
  const auto& params = header.at("params");
  if (static_cast<int>(params.size()) != ps.count())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (int i = 0; i < ps.count(); ++i) {
    auto& p = ps.at(i);
    if (params[i].at("name") != p.name)
      throw std::runtime_error("checkpoint: parameter name mismatch at " + p.name);
    if (params[i].at("shape").get<std::vector<int>>() != p.value.shape)
      throw std::runtime_error("checkpoint: shape mismatch at " + p.name);
    f.read(reinterpret_cast<char*>(p.value.ptr()),
           static_cast<std::streamsize>(p.value.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
  return header.at("meta").dump();
}

TrainResult fit(CoSegModel<float>& model, const std::vector<const ImageSample*>& train,
                const std::vector<const ImageSample*>& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train: empty training set");
  const int K = model.config().dec.n_classes;

  int start_epoch = 0;
  if (!cfg.resume_from.empty()) {
    json meta = json::parse(load_checkpoint(cfg.resume_from, model.store));
    if (meta.contains("epoch")) start_epoch = meta["epoch"].get<int>() + 1;
  }

  std::vector<Targets<float>> targets;
  std::vector<Tensor<float>> images;
  targets.reserve(train.size());
  images.reserve(train.size());
  for (const ImageSample* s : train) {
    targets.push_back(targets_from_sample(*s, K));
    images.push_back(image_tensor(s->image));
  }

  Adam opt(model.store);
  std::vector<std::vector<float>> grads(model.store.count());
  for (int i = 0; i < model.store.count(); ++i)
    grads[i].assign(model.store.at(i).value.size(), 0.f);

  std::mt19937_64 rng(0xf17ULL + static_cast<unsigned long long>(cfg.seed));
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult res;
  std::ofstream log_csv;
  if (!cfg.out_dir.empty()) {
    log_csv.open(cfg.out_dir + "/train_log.csv",
                 start_epoch > 0 ? std::ios::app : std::ios::out);
    if (start_epoch == 0)
      log_csv << "epoch,lr,prior_sem,prior_ins,seg_sem,seg_ins,total,val_dice,val_f1\n";
  }

  for (int epoch = start_epoch; epoch < start_epoch + cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(b0 + cfg.batch_size, order.size());
      const float inv = 1.f / static_cast<float>(b1 - b0);
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.f);
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const int si = order[bi];
        Tape<float> t;
        model.store.attach(t);
        Var<float> x = ops::constant(t, images[si]);
        CoSegOutput<float> out = model.forward_two_stage(t, x, cfg.forward);
        LossReportT<float> rep =
            losses::total_loss(out, targets[si], cfg.weights, cfg.forward.use_prompts);
        t.backward(rep.total_var.id);
        for (int i = 0; i < model.store.count(); ++i) {
          const auto& p = model.store.at(i);
          if (!p.trainable) continue;
          const Tensor<float>& g = t.grad(p.var);
          for (std::int64_t j = 0; j < g.size(); ++j) grads[i][j] += inv * g[j];
        }
        el.prior_sem += rep.prior_sem;
        el.prior_ins += rep.prior_ins;
        el.seg_sem += rep.seg_sem;
        el.seg_ins += rep.seg_ins;
        el.total += rep.total;
      }
      opt.step(model.store, grads, lr);
    }
    const double n = static_cast<double>(order.size());
    el.prior_sem /= n;
    el.prior_ins /= n;
    el.seg_sem /= n;
    el.seg_ins /= n;
    el.total /= n;

    const bool last = epoch == start_epoch + cfg.epochs - 1;
    if (!val.empty() && cfg.eval_every > 0 &&
        ((epoch - start_epoch) % cfg.eval_every == cfg.eval_every - 1 || last)) {
      double dice = 0, f1 = 0;
      for (const ImageSample* s : val) {
        Prediction p = predict(model, s->image, cfg.forward);
        dice += tissue_dice(p.semantic, s->semantic, K);
        f1 += metrics::detection_prf(metrics::match_instances(p.instance, s->instance)).f1;
      }
      el.val_dice = dice / static_cast<double>(val.size());
      el.val_f1 = f1 / static_cast<double>(val.size());
      if (el.val_dice > res.best_val_dice) {
        res.best_val_dice = el.val_dice;
        res.best_epoch = epoch;
        if (!cfg.out_dir.empty()) {
          res.checkpoint_path = cfg.out_dir + "/best.ckpt";
          json meta = {{"epoch", epoch}, {"val_dice", el.val_dice}, {"val_f1", el.val_f1}};
          save_checkpoint(res.checkpoint_path, model.store, meta.dump());
        }
      }
    }
    if (log_csv.is_open()) {
      log_csv << el.epoch << ',' << el.lr << ',' << el.prior_sem << ',' << el.prior_ins << ','
              << el.seg_sem << ',' << el.seg_ins << ',' << el.total << ',' << el.val_dice << ','
              << el.val_f1 << '\n';
      log_csv.flush();
    }
    res.log.push_back(el);
  }
  if (!cfg.out_dir.empty()) {
    json meta = {{"epoch", start_epoch + cfg.epochs - 1}};
    save_checkpoint(cfg.out_dir + "/last.ckpt", model.store, meta.dump());
    if (res.checkpoint_path.empty()) res.checkpoint_path = cfg.out_dir + "/last.ckpt";
  }
  return res;
}

std::vector<AblationVariant> ablation_ladder() {
  std::vector<AblationVariant> v(4);
  v[0].label = "Baseline";
  v[0].forward = {false, false, true};
  v[1].label = "+P";
  v[1].forward = {true, false, true};
  v[2].label = "+P+D";
  v[2].forward = {true, true, true};
  v[3].label = "+P+D+C";
  v[3].forward = {true, true, false};
  return v;
}

AblationTable ablate(const std::vector<const ImageSample*>& train,
                     const std::vector<const ImageSample*>& val,
                     const std::vector<const ImageSample*>& test, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, int n_seeds) {
  if (n_seeds < 1) throw std::invalid_argument("ablate: need at least one seed");
  AblationTable table;
  table.columns = {"Dice", "mIoU", "HD", "F1", "Prec.", "Rec.", "AJI"};
  for (const AblationVariant& var : ablation_ladder()) {
    std::vector<std::vector<double>> vals(table.columns.size());
    for (int s = 0; s < n_seeds; ++s) {
      ModelConfig mc = mcfg;
      mc.seed = tcfg.seed + s;
      CoSegModel<float> model(mc);
      TrainConfig tc = tcfg;
      tc.seed = tcfg.seed + s;
      tc.forward = var.forward;
      tc.out_dir.clear();
      fit(model, train, val, tc);
      EvalReport r = evaluate(model, test, "test", var.forward);
      vals[0].push_back(r.tissue.dice);
      vals[1].push_back(r.tissue.miou);
      vals[2].push_back(r.tissue.hd);
      vals[3].push_back(r.nuclei.f1);
      vals[4].push_back(r.nuclei.precision);
      vals[5].push_back(r.nuclei.recall);
      vals[6].push_back(r.nuclei.aji);
    }
    AblationRow row;
    row.label = var.label;
    for (const auto& xs : vals) {
      AblationCell c;
      for (double x : xs) c.mean += x;
      c.mean /= xs.size();
      if (xs.size() > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - c.mean) * (x - c.mean);
        c.stddev = std::sqrt(ss / (xs.size() - 1));
      }
      row.cells.push_back(c);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string ablation_csv(const AblationTable& t) {
  std::ostringstream os;
  os << "Variant";
  for (const auto& c : t.columns) os << ',' << c << ',' << c << " std";
  os << '\n';
  for (const auto& r : t.rows) {
    os << r.label;
    for (const auto& c : r.cells) os << ',' << c.mean << ',' << c.stddev;
    os << '\n';
  }
  return os.str();
}

std::string ablation_text(const AblationTable& t) {
  std::ostringstream os;
  auto cell = [](double mean, double sd) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", mean, sd);
    return std::string(buf);
  };
  os << "Variant";
  for (const auto& c : t.columns) os << '\t' << c;
  os << '\n';
  for (const auto& r : t.rows) {
    os << r.label;
    for (const auto& c : r.cells) os << '\t' << cell(c.mean, c.stddev);
    os << '\n';
  }
  return os.str();
}

}  // namespace coseg::train
