#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace coseg {

// Dense row-major tensor. Feature maps use (H, W, C) so the flat view is a
// (H*W) x C token matrix.
template <class S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> sh) : shape(std::move(sh)), data(count(shape), S(0)) {}
  Tensor(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    assert(static_cast<std::int64_t>(data.size()) == count(shape));
  }

  static std::int64_t count(const std::vector<int>& sh) {
    std::int64_t n = 1;
    for (int d : sh) n *= d;
    return n;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }
  S& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // Rows/cols of the flat 2-D view: all leading dims collapse into rows.
  int cols() const { return shape.empty() ? 1 : shape.back(); }
  std::int64_t rows() const { return shape.empty() ? 1 : size() / cols(); }

  static Tensor zeros(std::vector<int> sh) { return Tensor(std::move(sh)); }
  static Tensor full(std::vector<int> sh, S v) {
    Tensor t(std::move(sh));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<int> sh, std::mt19937_64& rng, S stddev) {
    Tensor t(std::move(sh));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : t.data) v = static_cast<S>(nd(rng)) * stddev;
    return t;
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

}  // namespace coseg
