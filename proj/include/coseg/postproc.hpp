#pragma once

#include <vector>

#include "coseg/image_io.hpp"
#include "coseg/synthdata.hpp"

namespace coseg::postproc {

struct Thresholds {
  double t_fg = 0.5;
  double t_marker = 0.4;
  int min_area = 10;
};

// 3x3 Sobel with replicate border padding; maps must be at least 3x3.
void sobel_grad(const std::vector<float>& map, int H, int W, std::vector<float>& gx,
                std::vector<float>& gy);

// HoverNet-style instance recovery: threshold the binary probability map,
// build a gradient-energy surface from the HV maps, seed markers where both
// HV values are near zero (instance centers) and flood a marker-based
// watershed over the energy. t_marker bounds |h| and |v| for marker pixels.
LabelMap instances_from_hv(const std::vector<float>& binary_prob, const HVMaps& hv,
                           const Thresholds& th = {});

// 4-connected components of a binary mask, ids 1..n in scan order.
LabelMap connected_components(const LabelMap& binary);

}  // namespace coseg::postproc
