#pragma once

#include <optional>
#include <string>
#include <vector>

#include "coseg/losses.hpp"
#include "coseg/metrics.hpp"
#include "coseg/postproc.hpp"
#include "coseg/synthdata.hpp"

namespace coseg::train {

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.98;  // multiplicative, per epoch
  int epochs = 300;
  int batch_size = 16;
  int seed = 0;
  int eval_every = 1;  // epochs between val evaluations; 0 disables
  LossWeights weights;
  ForwardOptions forward;
  bool freeze_base = false;
  std::string out_dir;     // empty = no artifacts written
  std::string resume_from;  // checkpoint path; empty = fresh start

  void validate() const;
};

double lr_at_epoch(const TrainConfig& cfg, int epoch);

// Adam with bias correction; state per trainable parameter.
class Adam {
 public:
  Adam(const ParamStore<float>& ps, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  // grad: flat per-parameter gradient accumulators, same layout as the store.
  void step(ParamStore<float>& ps, const std::vector<std::vector<float>>& grad, double lr);
  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

Targets<float> targets_from_sample(const ImageSample& s, int n_classes);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double prior_sem = 0, prior_ins = 0, seg_sem = 0, seg_ins = 0, total = 0;
  double val_dice = -1, val_f1 = -1;  // -1 = not evaluated this epoch
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val_dice = -1;
  int best_epoch = -1;
  std::string checkpoint_path;  // best-val snapshot when out_dir is set
};

TrainResult fit(CoSegModel<float>& model, const std::vector<const ImageSample*>& train,
                const std::vector<const ImageSample*>& val, const TrainConfig& cfg);

// Checkpoints: magic, json header (names + shapes + user meta), raw float data.
void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                     const std::string& meta_json);
// Returns the stored meta json; parameter names and shapes must match.
std::string load_checkpoint(const std::string& path, ParamStore<float>& ps);

struct Prediction {
  LabelMap semantic;           // argmax tissue class per pixel
  LabelMap instance;           // watershed-recovered nuclei ids
  std::vector<float> nuclei_prob;
  HVMaps hv;
};

Prediction predict(CoSegModel<float>& model, const Image& img, const ForwardOptions& opt,
                   const postproc::Thresholds& th = {});

struct TaskScores {
  double dice = 0, miou = 0, hd = 0;           // tissue
  double f1 = 0, precision = 0, recall = 0, aji = 0;  // nuclei
  double pq = 0, dq = 0, sq = 0;
};

struct ImageScores {
  std::string id;
  TaskScores tissue, nuclei;
};

struct EvalReport {
  std::string split;
  int n_images = 0;
  TaskScores tissue, nuclei;  // means over images
  std::vector<ImageScores> per_image;
};

// oracle_inject scores the ground truth against itself; a sanity mode that
// must produce perfect metrics.
EvalReport evaluate(CoSegModel<float>& model, const std::vector<const ImageSample*>& samples,
                    const std::string& split, const ForwardOptions& opt,
                    bool oracle_inject = false, const postproc::Thresholds& th = {});

std::string eval_report_json(const EvalReport& r);

// One ablation variant: flags plus the paper-style row label.
struct AblationVariant {
  std::string label;
  ForwardOptions forward;
};

std::vector<AblationVariant> ablation_ladder();

struct AblationCell {
  double mean = 0, stddev = 0;
};

struct AblationRow {
  std::string label;
  // Dice, mIoU, HD, F1, Prec., Rec., AJI
  std::vector<AblationCell> cells;
};

struct AblationTable {
  std::vector<std::string> columns;
  std::vector<AblationRow> rows;
};

AblationTable ablate(const std::vector<const ImageSample*>& train,
                     const std::vector<const ImageSample*>& val,
                     const std::vector<const ImageSample*>& test, const ModelConfig& mcfg,
                     const TrainConfig& tcfg, int n_seeds);

std::string ablation_csv(const AblationTable& t);
std::string ablation_text(const AblationTable& t);

}  // namespace coseg::train
