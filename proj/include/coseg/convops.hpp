#pragma once

#include <array>
#include <map>
#include <memory>

#include "coseg/autodiff.hpp"

namespace coseg {
namespace ops {

enum class Pad { Zero, Replicate };

// Index plan for im2col on an (H, W, Cin) feature map. Cached per shape by the
// layers that own convolutions.
struct ConvPlan {
  int H = 0, W = 0, Cin = 0, kh = 0, kw = 0, stride = 1, Ho = 0, Wo = 0;
  std::shared_ptr<std::vector<std::int64_t>> col_map;  // (Ho*Wo, kh*kw*Cin)
};

inline ConvPlan make_conv_plan(int H, int W, int Cin, int kh, int kw, int stride, Pad pad,
                               bool same) {
  // Plans are pure functions of their arguments and expensive at 256x256, so
  // memoize them. Single-threaded by design.
  using Key = std::array<int, 8>;
  static std::map<Key, ConvPlan> cache;
  Key key{H, W, Cin, kh, kw, stride, static_cast<int>(pad), same ? 1 : 0};
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  ConvPlan p;
  p.H = H; p.W = W; p.Cin = Cin; p.kh = kh; p.kw = kw; p.stride = stride;
  int ph = same ? (kh - 1) / 2 : 0;
  int pw = same ? (kw - 1) / 2 : 0;
  p.Ho = same ? (H + stride - 1) / stride : (H - kh) / stride + 1;
  p.Wo = same ? (W + stride - 1) / stride : (W - kw) / stride + 1;
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::int64_t>(p.Ho) * p.Wo * kh * kw * Cin);
  std::int64_t idx = 0;
  for (int oy = 0; oy < p.Ho; ++oy) {
    for (int ox = 0; ox < p.Wo; ++ox) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          int iy = oy * stride + ky - ph;
          int ix = ox * stride + kx - pw;
          bool inside = iy >= 0 && iy < H && ix >= 0 && ix < W;
          if (!inside && pad == Pad::Replicate) {
            iy = std::min(std::max(iy, 0), H - 1);
            ix = std::min(std::max(ix, 0), W - 1);
            inside = true;
          }
          for (int c = 0; c < Cin; ++c)
            (*map)[idx++] = inside ? (static_cast<std::int64_t>(iy) * W + ix) * Cin + c : -1;
        }
      }
    }
  }
  p.col_map = map;
  cache[key] = p;
  return p;
}

// x: (H, W, Cin), w: (kh*kw*Cin, Cout), b: (Cout) or invalid -> (Ho, Wo, Cout)
template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, const ConvPlan& p) {
  const int patch = p.kh * p.kw * p.Cin;
  Var<S> col = gather(x, p.col_map, {p.Ho * p.Wo, patch});
  Var<S> y = matmul(col, w);
  if (b.valid()) y = add_bias(y, b);
  return reshape(y, {p.Ho, p.Wo, static_cast<int>(w.shape()[1])});
}

// Transposed conv with kernel 2, stride 2 (non-overlapping): pure pixel shuffle.
// x: (H, W, Cin), w: (Cin, Cout*4) laid out as [(dy*2+dx)*Cout + co].
template <class S>
Var<S> conv_transpose_2x2(Var<S> x, Var<S> w, Var<S> b, int Cout,
                          std::shared_ptr<std::vector<std::int64_t>>& map_cache) {
  const auto& sh = x.shape();
  const int H = sh[0], W = sh[1];
  Var<S> y = matmul(reshape(x, {H * W, sh[2]}), w);  // (H*W, Cout*4)
  const std::int64_t n = static_cast<std::int64_t>(H) * W * 4 * Cout;
  if (!map_cache || static_cast<std::int64_t>(map_cache->size()) != n) {
    map_cache = std::make_shared<std::vector<std::int64_t>>(n);
    std::int64_t idx = 0;
    for (int oy = 0; oy < 2 * H; ++oy) {
      for (int ox = 0; ox < 2 * W; ++ox) {
        int iy = oy / 2, ix = ox / 2, dy = oy % 2, dx = ox % 2;
        std::int64_t row = static_cast<std::int64_t>(iy) * W + ix;
        for (int c = 0; c < Cout; ++c)
          (*map_cache)[idx++] = row * (4 * Cout) + (dy * 2 + dx) * Cout + c;
      }
    }
  }
  Var<S> out = gather(y, map_cache, {2 * H, 2 * W, Cout});
  if (b.valid()) out = add_bias(reshape(out, {2 * H * 2 * W, Cout}), b);
  return reshape(out, {2 * H, 2 * W, Cout});
}

// Bilinear resize (half-pixel centers) for (h, w, C) -> (H, W, C).
template <class S>
std::shared_ptr<LinearMap<S>> make_bilinear_plan(int h, int w, int C, int H, int W) {
  using Key = std::array<int, 5>;
  static std::map<Key, std::shared_ptr<LinearMap<S>>> cache;
  Key key{h, w, C, H, W};
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto lm = std::make_shared<LinearMap<S>>();
  lm->fanout = 4;
  lm->out_shape = {H, W, C};
  const std::int64_t n = static_cast<std::int64_t>(H) * W * C;
  lm->idx.resize(n * 4);
  lm->w.resize(n * 4);
  const double sy = static_cast<double>(h) / H;
  const double sx = static_cast<double>(w) / W;
  std::int64_t pos = 0;
  for (int oy = 0; oy < H; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int y0c = std::min(std::max(y0, 0), h - 1);
    int y1c = std::min(std::max(y0 + 1, 0), h - 1);
    for (int ox = 0; ox < W; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int x0c = std::min(std::max(x0, 0), w - 1);
      int x1c = std::min(std::max(x0 + 1, 0), w - 1);
      for (int c = 0; c < C; ++c) {
        auto at = [&](int yy, int xx) {
          return (static_cast<std::int64_t>(yy) * w + xx) * C + c;
        };
        lm->idx[pos * 4 + 0] = at(y0c, x0c);
        lm->idx[pos * 4 + 1] = at(y0c, x1c);
        lm->idx[pos * 4 + 2] = at(y1c, x0c);
        lm->idx[pos * 4 + 3] = at(y1c, x1c);
        lm->w[pos * 4 + 0] = static_cast<S>((1 - wy) * (1 - wx));
        lm->w[pos * 4 + 1] = static_cast<S>((1 - wy) * wx);
        lm->w[pos * 4 + 2] = static_cast<S>(wy * (1 - wx));
        lm->w[pos * 4 + 3] = static_cast<S>(wy * wx);
        ++pos;
      }
    }
  }
  cache[key] = lm;
  return lm;
}

// Window partition map: (H, W, C) -> (nWin, win*win, C); win must divide H and W.
inline std::shared_ptr<std::vector<std::int64_t>> make_window_map(int H, int W, int C, int win,
                                                                  bool reverse) {
  using Key = std::array<int, 5>;
  static std::map<Key, std::shared_ptr<std::vector<std::int64_t>>> cache;
  Key key{H, W, C, win, reverse ? 1 : 0};
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const int nh = H / win, nw = W / win;
  auto map = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::int64_t>(H) * W * C);
  std::int64_t idx = 0;
  for (int bh = 0; bh < nh; ++bh)
    for (int bw = 0; bw < nw; ++bw)
      for (int iy = 0; iy < win; ++iy)
        for (int ix = 0; ix < win; ++ix)
          for (int c = 0; c < C; ++c) {
            std::int64_t grid =
                (static_cast<std::int64_t>(bh * win + iy) * W + (bw * win + ix)) * C + c;
            if (reverse) {
              // windowed layout index for this grid position
              std::int64_t winpos =
                  ((static_cast<std::int64_t>(bh) * nw + bw) * (win * win) +
                   iy * win + ix) * C + c;
              (*map)[grid] = winpos;
            } else {
              (*map)[idx] = grid;
            }
            ++idx;
          }
  cache[key] = map;
  return map;
}

// (N, C) <-> (C, N)
inline std::shared_ptr<std::vector<std::int64_t>> make_transpose_map(int N, int C) {
  using Key = std::array<int, 2>;
  static std::map<Key, std::shared_ptr<std::vector<std::int64_t>>> cache;
  Key key{N, C};
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::int64_t>(N) * C);
  std::int64_t idx = 0;
  for (int c = 0; c < C; ++c)
    for (int n = 0; n < N; ++n) (*map)[idx++] = static_cast<std::int64_t>(n) * C + c;
  cache[key] = map;
  return map;
}

template <class S>
Var<S> transpose2d(Var<S> x) {
  const auto& sh = x.shape();
  const int N = static_cast<int>(x.value().rows());
  const int C = x.value().cols();
  (void)sh;
  return gather(x, make_transpose_map(N, C), {C, N});
}

}  // namespace ops
}  // namespace coseg
