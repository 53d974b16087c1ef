#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace coseg {

// Row-major integer label map (semantic classes or instance ids).
struct LabelMap {
  int H = 0, W = 0;
  std::vector<std::int32_t> ids;

  std::int32_t& at(int y, int x) { return ids[static_cast<std::size_t>(y) * W + x]; }
  std::int32_t at(int y, int x) const { return ids[static_cast<std::size_t>(y) * W + x]; }
  bool same_shape(const LabelMap& o) const { return H == o.H && W == o.W; }
};

// Row-major RGB image, values in [0,1].
struct Image {
  int H = 0, W = 0;
  std::vector<float> rgb;  // H*W*3

  float& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * W + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * W + x) * 3 + c]; }
};

namespace io {

void write_rgb8(const std::string& path, const Image& img);
Image read_rgb8(const std::string& path);

// Single channel PNGs: 8-bit for semantic labels, 16-bit for instance ids.
void write_gray8(const std::string& path, const LabelMap& m);
LabelMap read_gray8(const std::string& path);
void write_gray16(const std::string& path, const LabelMap& m);
LabelMap read_gray16(const std::string& path);

}  // namespace io
}  // namespace coseg
