#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "coseg/oracle.hpp"
#include "coseg/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace coseg;

namespace {

constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;

struct ModelFlags {
  int width = 32;
  int classes = 3;
  int heads = 1;
  int depth = 1;  // extra blocks in the last encoder stage
  int rp_hidden = 16;
  bool peft = false;
  bool freeze_base = false;
  int lora_rank = 4;
  int adapter_dim = 8;
};

ModelConfig to_model_config(const ModelFlags& f) {
  ModelConfig mc;
  mc.enc.stage_widths = {f.width / 4, f.width / 2, f.width};
  mc.enc.stage_depths = {1, 1, f.depth};
  mc.enc.n_heads = f.heads;
  mc.enc.lora_rank = f.lora_rank;
  mc.enc.adapter_bottleneck = f.adapter_dim;
  mc.enc.freeze_base = f.freeze_base;
  mc.dec.width = f.width;
  mc.dec.n_classes = f.classes;
  mc.dec.n_heads = f.heads;
  mc.rp_hidden = f.rp_hidden;
  mc.use_peft = f.peft;
  mc.validate();
  return mc;
}

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--width", f.width, "encoder output / decoder width (divisible by 4)");
  cmd->add_option("--classes", f.classes, "number of tissue classes");
  cmd->add_option("--heads", f.heads, "attention heads");
  cmd->add_option("--depth", f.depth, "blocks in the last encoder stage");
  cmd->add_option("--rp-hidden", f.rp_hidden, "prompt encoder hidden width");
  cmd->add_option("--peft", f.peft, "attach LoRA + adapters");
  cmd->add_option("--freeze-base", f.freeze_base, "freeze base encoder weights");
  cmd->add_option("--lora-rank", f.lora_rank, "LoRA rank");
  cmd->add_option("--adapter-dim", f.adapter_dim, "adapter bottleneck width");
}

json model_flags_json(const ModelFlags& f) {
  return {{"width", f.width},       {"classes", f.classes},
          {"heads", f.heads},       {"depth", f.depth},
          {"rp_hidden", f.rp_hidden}, {"peft", f.peft},
          {"freeze_base", f.freeze_base}, {"lora_rank", f.lora_rank},
          {"adapter_dim", f.adapter_dim}};
}

ModelFlags model_flags_from_json(const json& j) {
  ModelFlags f;
  f.width = j.at("width");
  f.classes = j.at("classes");
  f.heads = j.at("heads");
  f.depth = j.at("depth");
  f.rp_hidden = j.at("rp_hidden");
  f.peft = j.at("peft");
  f.freeze_base = j.at("freeze_base");
  f.lora_rank = j.at("lora_rank");
  f.adapter_dim = j.at("adapter_dim");
  return f;
}

// Output root: relative --out paths are resolved under $COSEG_OUT_ROOT when set.
std::string resolve_out(const std::string& out) {
  const char* root = std::getenv("COSEG_OUT_ROOT");
  if (!root || out.empty() || fs::path(out).is_absolute()) return out;
  return (fs::path(root) / out).string();
}

// Flat JSON config file; explicit command-line flags override its values.
void apply_config_defaults(CLI::App* cmd, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  json j = json::parse(f);
  if (!j.is_object()) throw std::invalid_argument("config: expected a flat JSON object");
  for (const auto& [key, val] : j.items()) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt) throw std::invalid_argument("config: unknown key '" + key + "'");
    std::string s = val.is_string() ? val.get<std::string>() : val.dump();
    opt->default_val(s);
  }
}

// Scan argv ahead of parsing so config values become option defaults.
void preapply_config(CLI::App& app, int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      for (int s = 1; s < i; ++s) {
        if (CLI::App* sub = app.get_subcommand_no_throw(argv[s])) {
          apply_config_defaults(sub, argv[i + 1]);
          return;
        }
      }
    }
  }
}

void write_manifest(const std::string& out_dir, const std::string& command, json inputs) {
  fs::create_directories(out_dir);
  json m = {{"command", command}, {"inputs", std::move(inputs)}, {"version", 1}};
  std::ofstream f(fs::path(out_dir) / "run_manifest.json");
  f << m.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

cv::Vec3b class_color(int c) {
  static const cv::Vec3b palette[] = {
      {60, 60, 60},    {80, 180, 80},  {200, 120, 60}, {80, 100, 220},
      {180, 180, 60},  {180, 60, 180}, {60, 180, 180}, {140, 140, 220},
  };
  return palette[c % 8];
}

cv::Mat to_bgr(const Image& img) {
  cv::Mat m(img.H, img.W, CV_8UC3);
  for (int y = 0; y < img.H; ++y)
    for (int x = 0; x < img.W; ++x) {
      auto& px = m.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c)
        px[2 - c] = cv::saturate_cast<uchar>(img.at(y, x, c) * 255.f);
    }
  return m;
}

// Left: semantic classes blended over the image. Right: instance boundaries.
cv::Mat render_overlay(const Image& img, const LabelMap& semantic, const LabelMap& instance) {
  cv::Mat base = to_bgr(img);
  cv::Mat left = base.clone();
  for (int y = 0; y < img.H; ++y)
    for (int x = 0; x < img.W; ++x) {
      int c = semantic.at(y, x);
      if (c == 0) continue;
      auto& px = left.at<cv::Vec3b>(y, x);
      cv::Vec3b col = class_color(c);
      for (int k = 0; k < 3; ++k)
        px[k] = cv::saturate_cast<uchar>(0.5 * px[k] + 0.5 * col[k]);
    }
  cv::Mat right = base.clone();
  for (int y = 0; y < img.H; ++y)
    for (int x = 0; x < img.W; ++x) {
      std::int32_t id = instance.at(y, x);
      if (id == 0) continue;
      bool boundary = false;
      for (auto [dy, dx] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= img.H || nx < 0 || nx >= img.W || instance.at(ny, nx) != id) {
          boundary = true;
          break;
        }
      }
      if (boundary) right.at<cv::Vec3b>(y, x) = {0, 0, 255};
    }
  cv::Mat out;
  cv::hconcat(left, right, out);
  return out;
}

void plot_loss_curve(const std::vector<train::EpochLog>& log, const fs::path& path) {
  const int W = 640, H = 480, pad = 48;
  cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::rectangle(canvas, {pad, pad}, {W - pad, H - pad}, cv::Scalar(0, 0, 0));
  if (!log.empty()) {
    double lo = log[0].total, hi = log[0].total;
    for (const auto& el : log) {
      lo = std::min(lo, el.total);
      hi = std::max(hi, el.total);
    }
    if (hi <= lo) hi = lo + 1;
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < log.size(); ++i) {
      double fx = log.size() == 1 ? 0.0 : static_cast<double>(i) / (log.size() - 1);
      double fy = (log[i].total - lo) / (hi - lo);
      pts.emplace_back(pad + static_cast<int>(fx * (W - 2 * pad)),
                       H - pad - static_cast<int>(fy * (H - 2 * pad)));
    }
    cv::polylines(canvas, pts, false, cv::Scalar(180, 80, 30), 2, cv::LINE_AA);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "total loss  [%.4f, %.4f]  epochs %d..%d", lo, hi,
                  log.front().epoch, log.back().epoch);
    cv::putText(canvas, buf, {pad, pad - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  }
  cv::imwrite(path.string(), canvas);
}

std::vector<const ImageSample*> split_ptrs(const Dataset& ds, const std::string& name) {
  return ds.split(name);
}

int cmd_synth(const SynthConfig& sc, int n, const std::string& out) {
  sc.validate();
  std::string dir = resolve_out(out);
  write_manifest(dir, "synth",
                 {{"n", n}, {"seed", sc.seed}, {"height", sc.H}, {"width", sc.W},
                  {"classes", sc.n_classes}, {"config_hash", synth::config_hash(sc)}});
  Manifest m = synth::generate_dataset(sc, n, dir);
  std::cout << "wrote " << n << " samples to " << dir << " (train " << m.splits.train.size()
            << ", val " << m.splits.val.size() << ", test " << m.splits.test.size() << ")\n";
  return 0;
}

int cmd_train(const ModelFlags& mf, train::TrainConfig tc, const std::string& data,
              const std::string& out) {
  tc.validate();
  ModelConfig mc = to_model_config(mf);
  std::string dir = resolve_out(out);
  tc.out_dir = dir;

  json inputs = {{"data", data},       {"model", model_flags_json(mf)},
                 {"lr", tc.lr},        {"lr_decay", tc.lr_decay},
                 {"epochs", tc.epochs}, {"batch", tc.batch_size},
                 {"seed", tc.seed},    {"lambda1", tc.weights.lambda1},
                 {"lambda2", tc.weights.lambda2},
                 {"use_prompts", tc.forward.use_prompts},
                 {"cross_guidance", tc.forward.cross_guidance},
                 {"detach", tc.forward.detach_between_forwards},
                 {"resume", tc.resume_from}};
  write_manifest(dir, "train", inputs);

  Dataset ds = synth::ingest_folder(data);
  auto tr = split_ptrs(ds, "train"), va = split_ptrs(ds, "val");
  if (tr.empty()) throw std::invalid_argument("train: dataset has no training split");

  mc.seed = tc.seed;
  CoSegModel<float> model(mc);
  std::cout << "parameters: " << model.store.total_scalars() << " ("
            << model.store.trainable_scalars() << " trainable, fraction "
            << trainable_fraction(model.store) << ")\n";

  train::TrainResult res = train::fit(model, tr, va, tc);

  json mj = {{"model", model_flags_json(mf)},
             {"forward",
              {{"use_prompts", tc.forward.use_prompts},
               {"cross_guidance", tc.forward.cross_guidance},
               {"detach", tc.forward.detach_between_forwards}}},
             {"classes", mf.classes}};
  write_text(fs::path(dir) / "model.json", mj.dump(2) + "\n");
  plot_loss_curve(res.log, fs::path(dir) / "loss_curve.png");

  std::cout << "trained " << tc.epochs << " epochs; best val dice " << res.best_val_dice
            << " at epoch " << res.best_epoch << "\ncheckpoint: " << res.checkpoint_path
            << "\n";
  return 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt, std::string model_json,
             const std::string& split, const std::string& out, bool oracle_inject) {
  std::string dir = resolve_out(out);
  if (!oracle_inject && ckpt.empty())
    throw std::invalid_argument("eval: --ckpt is required unless --oracle-inject is set");
  if (model_json.empty())
    model_json = (fs::path(ckpt).parent_path() / "model.json").string();
  std::ifstream mf(model_json);
  if (!mf) throw std::invalid_argument("eval: cannot open model config " + model_json);
  json mj = json::parse(mf);
  ModelFlags flags = model_flags_from_json(mj.at("model"));
  ForwardOptions opt;
  opt.use_prompts = mj.at("forward").at("use_prompts");
  opt.cross_guidance = mj.at("forward").at("cross_guidance");
  opt.detach_between_forwards = mj.at("forward").at("detach");

  write_manifest(dir, "eval",
                 {{"data", data}, {"ckpt", ckpt}, {"model", model_json},
                  {"split", split}, {"oracle_inject", oracle_inject}});

  Dataset ds = synth::ingest_folder(data);
  auto samples = split_ptrs(ds, split);
  if (samples.empty()) throw std::invalid_argument("eval: split '" + split + "' is empty");

  CoSegModel<float> model(to_model_config(flags));
  if (!oracle_inject) train::load_checkpoint(ckpt, model.store);

  train::EvalReport rep = train::evaluate(model, samples, split, opt, oracle_inject);
  write_text(fs::path(dir) / "report.json", train::eval_report_json(rep) + "\n");

  fs::create_directories(fs::path(dir) / "overlays");
  for (const ImageSample* s : samples) {
    cv::Mat ov;
    if (oracle_inject) {
      ov = render_overlay(s->image, s->semantic, s->instance);
    } else {
      train::Prediction p = train::predict(model, s->image, opt);
      ov = render_overlay(s->image, p.semantic, p.instance);
    }
    cv::imwrite((fs::path(dir) / "overlays" / (s->id + ".png")).string(), ov);
  }

  std::cout << "split " << split << " (" << rep.n_images << " images)\n"
            << "tissue: dice " << rep.tissue.dice << "  miou " << rep.tissue.miou << "  hd "
            << rep.tissue.hd << "  pq " << rep.tissue.pq << "\n"
            << "nuclei: f1 " << rep.nuclei.f1 << "  prec " << rep.nuclei.precision << "  rec "
            << rep.nuclei.recall << "  aji " << rep.nuclei.aji << "  pq " << rep.nuclei.pq
            << "\n";
  return 0;
}

int cmd_ablate(const ModelFlags& mf, train::TrainConfig tc, const std::string& data,
               const std::string& out, int seeds) {
  tc.validate();
  ModelConfig mc = to_model_config(mf);
  std::string dir = resolve_out(out);
  write_manifest(dir, "ablate",
                 {{"data", data}, {"model", model_flags_json(mf)}, {"epochs", tc.epochs},
                  {"batch", tc.batch_size}, {"seed", tc.seed}, {"seeds", seeds},
                  {"lr", tc.lr}, {"lr_decay", tc.lr_decay}});

  Dataset ds = synth::ingest_folder(data);
  auto tr = split_ptrs(ds, "train"), va = split_ptrs(ds, "val"), te = split_ptrs(ds, "test");
  train::AblationTable table = train::ablate(tr, va, te, mc, tc, seeds);
  write_text(fs::path(dir) / "ablation.csv", train::ablation_csv(table));
  std::string text = train::ablation_text(table);
  write_text(fs::path(dir) / "ablation.txt", text);
  std::cout << text;
  return 0;
}

int cmd_oracle_check(long trials, const std::string& out) {
  json checks = json::array();
  bool all_pass = true;
  auto record = [&](const std::string& name, bool pass, json detail) {
    checks.push_back({{"name", name}, {"pass", pass}, {"detail", std::move(detail)}});
    all_pass = all_pass && pass;
    if (!pass) std::cerr << "FAILED check: " << name << "\n";
  };

  {
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      int n1 = 2 + i % 7, n2 = 2 + (i / 7) % 7;
      oracle::JointTable j = oracle::make_random_joint(n1, n2, 1000 + i);
      for (auto dir : {oracle::Direction::Y1First, oracle::Direction::Y2First}) {
        oracle::JointTable back = oracle::joint_from_factors(oracle::factorize(j, dir));
        worst = std::max(worst, (back.probs - j.probs).cwiseAbs().maxCoeff());
      }
    }
    record("factorization_identity", worst < 1e-12, {{"max_abs_err", worst}});
  }
  {
    double worst_rel = 0;
    for (int i = 0; i < 10; ++i) {
      oracle::JointTable j = oracle::make_random_joint(3 + i % 4, 3 + (i / 4) % 4, 2000 + i);
      double exact = oracle::mutual_information(j);
      double est = oracle::mi_sample_estimate(j, trials, 3000 + i);
      worst_rel = std::max(worst_rel, std::abs(est - exact) / std::max(exact, 1e-12));
    }
    record("mi_estimator_relative_error", worst_rel < 0.05,
           {{"worst_rel_err", worst_rel}, {"trials", trials}});
  }
  {
    oracle::JointTable j = oracle::make_random_joint(4, 5, 42);
    Eigen::VectorXd m1 = j.probs.rowwise().sum();
    Eigen::VectorXd m2 = j.probs.colwise().sum();
    oracle::JointTable prod;
    prod.probs = m1 * m2.transpose();
    double est = oracle::mi_sample_estimate(prod, trials, 7);
    record("mi_zero_on_product_joint", est == 0.0, {{"estimate", est}});
  }
  {
    oracle::ToyModel truth = oracle::ToyModel::random(4, 3, 3, 11, 0.8);
    auto batch = oracle::make_coupled_batch(truth, 256, 12);
    oracle::ToyModel m = oracle::ToyModel::random(4, 3, 3, 13);
    double before = oracle::joint_nll(m, batch);
    double after = oracle::joint_nll(oracle::coupled_gradient_step(m, batch, 0.1), batch);
    record("coupled_step_decreases_nll", after < before, {{"before", before}, {"after", after}});
  }

  json report = {{"trials", trials}, {"all_pass", all_pass}, {"checks", checks}};
  if (!out.empty()) {
    std::string dir = resolve_out(out);
    write_manifest(dir, "oracle-check", {{"trials", trials}});
    write_text(fs::path(dir) / "oracle_check.json", report.dump(2) + "\n");
  }
  std::cout << report.dump(2) << "\n";
  return all_pass ? 0 : kExitCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"co-segmentation of tissue regions and nuclei"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  SynthConfig sc;
  int synth_n = 10;
  std::string synth_out = "dataset";
  synth_cmd->add_option("--n", synth_n, "number of samples");
  synth_cmd->add_option("--seed", sc.seed, "dataset seed");
  synth_cmd->add_option("--height", sc.H, "image height");
  synth_cmd->add_option("--width", sc.W, "image width");
  synth_cmd->add_option("--classes", sc.n_classes, "tissue classes");
  synth_cmd->add_option("--contrast", sc.class_contrast,
                        "hue separation between tissue classes (0 = density-only cue)");
  synth_cmd->add_option("--noise", sc.noise_sigma, "per-pixel gaussian noise sigma");
  synth_cmd->add_option("--densities", sc.nuclei_density_per_class,
                        "nuclei per 1000 tissue px, one value per class");
  synth_cmd->add_option("--radius-min", sc.radius_min, "minimum nucleus radius in px");
  synth_cmd->add_option("--radius-max", sc.radius_max, "maximum nucleus radius in px");
  synth_cmd->add_option("--distractors", sc.distractor_density,
                        "unlabeled nucleus-look blobs per 1000 background px");
  synth_cmd->add_option("--out", synth_out, "output folder");
  synth_cmd->add_option("--config", "flat JSON config file");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model");
  ModelFlags train_mf;
  train::TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 4;
  std::string train_data, train_out = "run";
  train_cmd->add_option("--data", train_data, "dataset folder")->required();
  train_cmd->add_option("--out", train_out, "output folder");
  train_cmd->add_option("--lr", tc.lr, "learning rate");
  train_cmd->add_option("--lr-decay", tc.lr_decay, "per-epoch lr decay factor");
  train_cmd->add_option("--epochs", tc.epochs, "training epochs");
  train_cmd->add_option("--batch", tc.batch_size, "batch size");
  train_cmd->add_option("--seed", tc.seed, "training seed");
  train_cmd->add_option("--lambda1", tc.weights.lambda1, "prior semantic loss weight");
  train_cmd->add_option("--lambda2", tc.weights.lambda2, "prior instance loss weight");
  train_cmd->add_option("--use-prompts", tc.forward.use_prompts,
                        "enable the prompted second forward");
  train_cmd->add_option("--cross-guidance", tc.forward.cross_guidance,
                        "route each head the other task's prompt (requires --use-prompts)");
  train_cmd->add_option("--detach", tc.forward.detach_between_forwards,
                        "block gradients between the two forwards");
  train_cmd->add_option("--eval-every", tc.eval_every, "epochs between val evaluations");
  train_cmd->add_option("--resume", tc.resume_from, "checkpoint to resume from");
  add_model_flags(train_cmd, train_mf);
  train_cmd->add_option("--config", "flat JSON config file");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_data, eval_ckpt, eval_model, eval_split = "test", eval_out = "eval";
  bool oracle_inject = false;
  eval_cmd->add_option("--data", eval_data, "dataset folder")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path");
  eval_cmd->add_option("--model", eval_model, "model.json path (default: next to ckpt)");
  eval_cmd->add_option("--split", eval_split, "dataset split");
  eval_cmd->add_option("--out", eval_out, "output folder");
  eval_cmd->add_option("--oracle-inject", oracle_inject,
                       "score ground truth against itself (sanity mode)");
  eval_cmd->add_option("--config", "flat JSON config file");

  // ablate
  auto* abl_cmd = app.add_subcommand("ablate", "run the 4-variant ablation ladder");
  ModelFlags abl_mf;
  train::TrainConfig atc;
  atc.epochs = 40;
  atc.batch_size = 4;
  atc.eval_every = 10;
  std::string abl_data, abl_out = "ablation";
  int abl_seeds = 3;
  abl_cmd->add_option("--data", abl_data, "dataset folder")->required();
  abl_cmd->add_option("--out", abl_out, "output folder");
  abl_cmd->add_option("--epochs", atc.epochs, "training epochs per run");
  abl_cmd->add_option("--batch", atc.batch_size, "batch size");
  abl_cmd->add_option("--lr", atc.lr, "learning rate");
  abl_cmd->add_option("--lr-decay", atc.lr_decay, "per-epoch lr decay factor");
  abl_cmd->add_option("--seed", atc.seed, "base seed");
  abl_cmd->add_option("--seeds", abl_seeds, "seeds per variant");
  abl_cmd->add_option("--eval-every", atc.eval_every, "epochs between val evaluations");
  add_model_flags(abl_cmd, abl_mf);
  abl_cmd->add_option("--config", "flat JSON config file");

  // oracle-check
  auto* orc_cmd = app.add_subcommand("oracle-check", "run the paradigm oracle suite");
  long trials = 100000;
  std::string orc_out;
  orc_cmd->add_option("--trials", trials, "samples per estimator trial");
  orc_cmd->add_option("--out", orc_out, "optional output folder for the JSON report");

  try {
    preapply_config(app, argc, argv);
    app.parse(argc, argv);
    if (synth_cmd->parsed()) return cmd_synth(sc, synth_n, synth_out);
    if (train_cmd->parsed()) return cmd_train(train_mf, tc, train_data, train_out);
    if (eval_cmd->parsed())
      return cmd_eval(eval_data, eval_ckpt, eval_model, eval_split, eval_out, oracle_inject);
    if (abl_cmd->parsed()) return cmd_ablate(abl_mf, atc, abl_data, abl_out, abl_seeds);
    if (orc_cmd->parsed()) return cmd_oracle_check(trials, orc_out);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ValidationError& e) {
    std::cerr << "invalid dataset: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailure;
  }
  return 0;
}
