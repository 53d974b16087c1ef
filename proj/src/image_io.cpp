#include "coseg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <stdexcept>

namespace coseg::io {

namespace {

[[noreturn]] void fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

}  // namespace

void write_rgb8(const std::string& path, const Image& img) {
  cv::Mat m(img.H, img.W, CV_8UC3);
  for (int y = 0; y < img.H; ++y)
    for (int x = 0; x < img.W; ++x) {
      auto& px = m.at<cv::Vec3b>(y, x);  // BGR on disk via OpenCV convention
      for (int c = 0; c < 3; ++c) {
        float v = img.at(y, x, c);
        px[2 - c] = static_cast<unsigned char>(std::lround(std::min(std::max(v, 0.f), 1.f) * 255.f));
      }
    }
  if (!cv::imwrite(path, m)) fail("failed to write image", path);
}

Image read_rgb8(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) fail("failed to read image", path);
  Image img;
  img.H = m.rows;
  img.W = m.cols;
  img.rgb.resize(static_cast<std::size_t>(m.rows) * m.cols * 3);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const auto& px = m.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = px[2 - c] / 255.f;
    }
  return img;
}

void write_gray8(const std::string& path, const LabelMap& lm) {
  cv::Mat m(lm.H, lm.W, CV_8UC1);
  for (int y = 0; y < lm.H; ++y)
    for (int x = 0; x < lm.W; ++x) {
      std::int32_t v = lm.at(y, x);
      if (v < 0 || v > 255) fail("label out of 8-bit range", path);
      m.at<unsigned char>(y, x) = static_cast<unsigned char>(v);
    }
  if (!cv::imwrite(path, m)) fail("failed to write label map", path);
}

LabelMap read_gray8(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) fail("failed to read label map", path);
  LabelMap lm;
  lm.H = m.rows;
  lm.W = m.cols;
  lm.ids.resize(static_cast<std::size_t>(m.rows) * m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) lm.at(y, x) = m.at<unsigned char>(y, x);
  return lm;
}

void write_gray16(const std::string& path, const LabelMap& lm) {
  cv::Mat m(lm.H, lm.W, CV_16UC1);
  for (int y = 0; y < lm.H; ++y)
    for (int x = 0; x < lm.W; ++x) {
      std::int32_t v = lm.at(y, x);
      if (v < 0 || v > 65535) fail("instance id out of 16-bit range", path);
      m.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(v);
    }
  if (!cv::imwrite(path, m)) fail("failed to write instance map", path);
}

LabelMap read_gray16(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) fail("failed to read instance map", path);
  if (m.type() != CV_16UC1) fail("expected 16-bit single channel instance map", path);
  LabelMap lm;
  lm.H = m.rows;
  lm.W = m.cols;
  lm.ids.resize(static_cast<std::size_t>(m.rows) * m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) lm.at(y, x) = m.at<std::uint16_t>(y, x);
  return lm;
}

}  // namespace coseg::io
