#pragma once

#include <vector>

#include "coseg/image_io.hpp"

namespace coseg::metrics {

// Pixel overlap scores on binary masks, reported in percent.
double dice_binary(const LabelMap& pred, const LabelMap& gt);

// Mean IoU over the classes present in either map (class 0 included),
// in percent.
double miou_multiclass(const LabelMap& pred, const LabelMap& gt, int n_classes);

// Symmetric Hausdorff distance between the foregrounds, in pixels.
// Both empty: 0. Exactly one empty: the image diagonal.
double hausdorff_binary(const LabelMap& pred, const LabelMap& gt);

struct MatchResult {
  // pairs of (pred id, gt id) matched at IoU > 0.5, plus their IoUs
  std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
  std::vector<double> ious;
  int n_pred = 0, n_gt = 0;
};

// Instance matching at IoU > 0.5. Greedy on descending IoU; at this
// threshold the matching is unique so greedy is exact.
MatchResult match_instances(const LabelMap& pred, const LabelMap& gt);

struct DetectionPRF {
  double f1 = 0, precision = 0, recall = 0;  // percent
};

DetectionPRF detection_prf(const MatchResult& m);

// Aggregated Jaccard Index in [0, 1]. Both maps empty: 1.
double aji(const LabelMap& pred, const LabelMap& gt);

struct PanopticResult {
  double pq = 0, dq = 0, sq = 0;  // percent
};

// Instance-level panoptic quality. Both maps empty: PQ = DQ = SQ = 100.
PanopticResult panoptic_quality(const LabelMap& pred, const LabelMap& gt);

// Semantic panoptic quality: per-class connected components become the
// instances, averaged over classes present in either map.
PanopticResult tissue_panoptic(const LabelMap& pred, const LabelMap& gt, int n_classes);

}  // namespace coseg::metrics
