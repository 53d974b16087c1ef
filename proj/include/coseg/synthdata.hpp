#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "coseg/image_io.hpp"

namespace coseg {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Image with paired semantic mask and instance map.
struct ImageSample {
  std::string id;
  Image image;
  LabelMap semantic;  // 0 = background, 1..K tissue classes
  LabelMap instance;  // 0 = background, unique positive id per nucleus
};

// Horizontal/vertical signed distances from each instance centroid,
// normalized per instance to [-1, 1]; zero outside nuclei.
struct HVMaps {
  int H = 0, W = 0;
  std::vector<float> h, v;
};

struct SynthConfig {
  int H = 256, W = 256;
  int n_classes = 3;
  int blob_count_min = 2, blob_count_max = 5;
  std::vector<double> nuclei_density_per_class{4.0, 1.2, 0.15};  // per 1000 tissue px
  double radius_min = 3.0, radius_max = 6.0;
  double noise_sigma = 0.10;
  // Nucleus-looking blobs rendered in the background but absent from the
  // labels. Rejecting them requires knowing where tissue is, which couples
  // the instance task to the semantic one. Per 1000 background px.
  double distractor_density = 0.0;
  // Hue separation between tissue classes. Small values make nuclei density
  // the dominant cue for tissue class, which is the point of the coupled set.
  double class_contrast = 0.05;
  int seed = 0;

  void validate() const {
    if (n_classes < 2) throw std::invalid_argument("synth: need at least 2 tissue classes");
    if (H % 16 != 0 || W % 16 != 0)
      throw std::invalid_argument("synth: H and W must be divisible by 16");
    if (static_cast<int>(nuclei_density_per_class.size()) != n_classes)
      throw std::invalid_argument("synth: one nuclei density per class required");
    for (double d : nuclei_density_per_class)
      if (d < 0) throw std::invalid_argument("synth: densities must be nonnegative");
    if (distractor_density < 0)
      throw std::invalid_argument("synth: distractor density must be nonnegative");
    if (radius_min < 1.0 || radius_max < radius_min)
      throw std::invalid_argument("synth: invalid nucleus radius range");
    if (2.0 * radius_max >= std::min(H, W))
      throw std::invalid_argument("synth: nucleus radius too large for image");
    if (blob_count_min < 1 || blob_count_max < blob_count_min)
      throw std::invalid_argument("synth: invalid blob count range");
  }
};

struct DatasetSplits {
  std::vector<std::string> train, val, test;
};

struct Manifest {
  int version = 1;
  DatasetSplits splits;
  std::string config_hash;
};

struct Dataset {
  std::vector<ImageSample> samples;  // ordered: train, val, test
  Manifest manifest;

  const ImageSample& by_id(const std::string& id) const;
  std::vector<const ImageSample*> split(const std::string& name) const;
};

namespace synth {

ImageSample generate_sample(const SynthConfig& cfg, int index);
HVMaps hv_targets(const LabelMap& instance);
void binary_targets(const ImageSample& s, LabelMap& tissue_fg, LabelMap& nuclei_fg);

// 7:1:2 split by index (floored, remainder to train). Writes the folder
// format: images/{id}.png, semantic/{id}.png (8-bit), instance/{id}.png
// (16-bit), manifest.json.
Manifest generate_dataset(const SynthConfig& cfg, int n, const std::string& out_dir);

Dataset ingest_folder(const std::string& dir);

std::string config_hash(const SynthConfig& cfg);

// True when every positive id forms a single 4-connected region.
bool instances_connected(const LabelMap& instance, std::string* offending = nullptr);

}  // namespace synth
}  // namespace coseg
