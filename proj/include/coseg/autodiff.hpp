#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "coseg/tensor.hpp"

namespace coseg {

// Reverse-mode autodiff over a per-forward tape. Nodes are appended in
// topological order, so backward() is a single reverse sweep.
template <class S>
class Tape {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MMap = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

  struct Node {
    Tensor<S> val;
    Tensor<S> grad;  // allocated lazily in backward()
    std::function<void(Tape&)> back;
    bool needs_grad = false;
  };

  std::vector<Node> nodes;

  int leaf(Tensor<S> v, bool needs_grad) {
    nodes.push_back(Node{std::move(v), {}, nullptr, needs_grad});
    return static_cast<int>(nodes.size()) - 1;
  }

  Tensor<S>& val(int id) { return nodes[id].val; }
  Tensor<S>& grad(int id) {
    Node& n = nodes[id];
    if (n.grad.data.empty()) n.grad = Tensor<S>::zeros(n.val.shape);
    return n.grad;
  }
  bool needs(int id) const { return nodes[id].needs_grad; }

  int make(Tensor<S> v, std::vector<int> parents, std::function<void(Tape&)> back) {
    bool ng = false;
    for (int p : parents) ng = ng || nodes[p].needs_grad;
    nodes.push_back(Node{std::move(v), {}, ng ? std::move(back) : nullptr, ng});
    return static_cast<int>(nodes.size()) - 1;
  }

  void backward(int root) {
    if (nodes[root].val.size() != 1)
      throw std::invalid_argument("backward: root must be scalar");
    grad(root)[0] = S(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes[id];
      if (n.back && !n.grad.data.empty()) n.back(*this);
      if (id > 0 && n.back) n.back = nullptr;  // release captures early
    }
  }

  std::size_t size() const { return nodes.size(); }
};

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;
  Var() = default;
  Var(Tape<S>* t, int i) : tape(t), id(i) {}
  const std::vector<int>& shape() const { return tape->val(id).shape; }
  const Tensor<S>& value() const { return tape->val(id); }
  bool valid() const { return tape != nullptr; }
};

namespace ops {

template <class S>
Var<S> leaf(Tape<S>& t, Tensor<S> v, bool needs_grad = false) {
  return {&t, t.leaf(std::move(v), needs_grad)};
}

template <class S>
Var<S> constant(Tape<S>& t, Tensor<S> v) {
  return leaf(t, std::move(v), false);
}

template <class S>
Var<S> stop_grad(Var<S> x) {
  return leaf(*x.tape, x.value(), false);
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor<S> out = t.val(a.id);
  const Tensor<S>& bv = t.val(b.id);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  int ai = a.id, bi = b.id;
  int id = t.make(std::move(out), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          if (tp.needs(ai)) {
            Tensor<S>& ga = tp.grad(ai);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
          if (tp.needs(bi)) {
            Tensor<S>& gb = tp.grad(bi);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
          }
        })
      : nullptr;
  return {&t, id};
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.shape() != b.shape()) throw std::invalid_argument("sub: shape mismatch");
  Tensor<S> out = t.val(a.id);
  const Tensor<S>& bv = t.val(b.id);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  int ai = a.id, bi = b.id;
  int id = t.make(std::move(out), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          if (tp.needs(ai)) {
            Tensor<S>& ga = tp.grad(ai);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
          if (tp.needs(bi)) {
            Tensor<S>& gb = tp.grad(bi);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
          }
        })
      : nullptr;
  return {&t, id};
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
  Tensor<S> out = t.val(a.id);
  const Tensor<S>& bv = t.val(b.id);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  int ai = a.id, bi = b.id;
  int id = t.make(std::move(out), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          const Tensor<S>& av = tp.val(ai);
          const Tensor<S>& bv2 = tp.val(bi);
          if (tp.needs(ai)) {
            Tensor<S>& ga = tp.grad(ai);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
          }
          if (tp.needs(bi)) {
            Tensor<S>& gb = tp.grad(bi);
            for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
          }
        })
      : nullptr;
  return {&t, id};
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Tensor<S> out = t.val(a.id);
  for (auto& v : out.data) v *= c;
  int ai = a.id;
  int id = t.make(std::move(out), {ai}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, id, c](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          Tensor<S>& ga = tp.grad(ai);
          for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        })
      : nullptr;
  return {&t, id};
}

// Scale a tensor by a single-element variable (a learnable gate).
template <class S>
Var<S> scale_by(Var<S> a, Var<S> s) {
  Tape<S>& t = *a.tape;
  if (t.val(s.id).size() != 1) throw std::invalid_argument("scale_by: gate must be scalar");
  const S c = t.val(s.id)[0];
  Tensor<S> out = t.val(a.id);
  for (auto& v : out.data) v *= c;
  int ai = a.id, si = s.id;
  int id = t.make(std::move(out), {ai, si}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, si, id](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          const Tensor<S>& av = tp.val(ai);
          const S c2 = tp.val(si)[0];
          if (tp.needs(ai)) {
            Tensor<S>& ga = tp.grad(ai);
            for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += c2 * g[i];
          }
          if (tp.needs(si)) {
            S acc = 0;
            for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
            tp.grad(si)[0] += acc;
          }
        })
      : nullptr;
  return {&t, id};
}

// x: (..., C) flat rows, bias: (C)
template <class S>
Var<S> add_bias(Var<S> x, Var<S> b) {
  Tape<S>& t = *x.tape;
  const int C = t.val(x.id).cols();
  if (t.val(b.id).size() != C) throw std::invalid_argument("add_bias: width mismatch");
  Tensor<S> out = t.val(x.id);
  const Tensor<S>& bv = t.val(b.id);
  const std::int64_t N = out.rows();
  for (std::int64_t r = 0; r < N; ++r)
    for (int c = 0; c < C; ++c) out[r * C + c] += bv[c];
  int xi = x.id, bi = b.id;
  int id = t.make(std::move(out), {xi, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, bi, id, N, C](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          if (tp.needs(xi)) {
            Tensor<S>& gx = tp.grad(xi);
            for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
          }
          if (tp.needs(bi)) {
            Tensor<S>& gb = tp.grad(bi);
            for (std::int64_t r = 0; r < N; ++r)
              for (int c = 0; c < C; ++c) gb[c] += g[r * C + c];
          }
        })
      : nullptr;
  return {&t, id};
}

// a: (N, K) flat rows, b: (K, M) -> (leading dims of a..., M)
template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Tensor<S>& av = t.val(a.id);
  const Tensor<S>& bv = t.val(b.id);
  const int K = av.cols();
  if (bv.shape.size() != 2 || bv.shape[0] != K)
    throw std::invalid_argument("matmul: inner dim mismatch");
  const int M = bv.shape[1];
  const std::int64_t N = av.rows();
  std::vector<int> osh(av.shape.begin(), av.shape.end() - 1);
  osh.push_back(M);
  Tensor<S> out(osh);
  typename Tape<S>::MMap(out.ptr(), N, M).noalias() =
      typename Tape<S>::CMap(av.ptr(), N, K) * typename Tape<S>::CMap(bv.ptr(), K, M);
  int ai = a.id, bi = b.id;
  int id = t.make(std::move(out), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id, N, K, M](Tape<S>& tp) {
          typename Tape<S>::CMap g(tp.grad(id).ptr(), N, M);
          if (tp.needs(ai)) {
            typename Tape<S>::CMap bm(tp.val(bi).ptr(), K, M);
            typename Tape<S>::MMap(tp.grad(ai).ptr(), N, K).noalias() += g * bm.transpose();
          }
          if (tp.needs(bi)) {
            typename Tape<S>::CMap am(tp.val(ai).ptr(), N, K);
            typename Tape<S>::MMap(tp.grad(bi).ptr(), K, M).noalias() += am.transpose() * g;
          }
        })
      : nullptr;
  return {&t, id};
}

// Batched matmul, a: (B, N, K), b: (B, K, M) -> (B, N, M)
template <class S>
Var<S> bmm_nn(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& ash = a.shape();
  const auto& bsh = b.shape();
  if (ash.size() != 3 || bsh.size() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1])
    throw std::invalid_argument("bmm_nn: shape mismatch");
  const int B = ash[0], N = ash[1], K = ash[2], M = bsh[2];
  Tensor<S> out({B, N, M});
  for (int bb = 0; bb < B; ++bb) {
    typename Tape<S>::MMap(out.ptr() + std::int64_t(bb) * N * M, N, M).noalias() =
        typename Tape<S>::CMap(t.val(a.id).ptr() + std::int64_t(bb) * N * K, N, K) *
        typename Tape<S>::CMap(t.val(b.id).ptr() + std::int64_t(bb) * K * M, K, M);
  }
  int ai = a.id, bi = b.id;
  int id = t.make(std::move(out), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id, B, N, K, M](Tape<S>& tp) {
          for (int bb = 0; bb < B; ++bb) {
            typename Tape<S>::CMap g(tp.grad(id).ptr() + std::int64_t(bb) * N * M, N, M);
            if (tp.needs(ai)) {
              typename Tape<S>::CMap bm(tp.val(bi).ptr() + std::int64_t(bb) * K * M, K, M);
              typename Tape<S>::MMap(tp.grad(ai).ptr() + std::int64_t(bb) * N * K, N, K)
                  .noalias() += g * bm.transpose();
            }
            if (tp.needs(bi)) {
              typename Tape<S>::CMap am(tp.val(ai).ptr() + std::int64_t(bb) * N * K, N, K);
              typename Tape<S>::MMap(tp.grad(bi).ptr() + std::int64_t(bb) * K * M, K, M)
                  .noalias() += am.transpose() * g;
            }
          }
        })
      : nullptr;
  return {&t, id};
}

// a: (B, N, K), b: (B, M, K) -> (B, N, M) = a . b^T
template <class S>
Var<S> bmm_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& ash = a.shape();
  const auto& bsh = b.shape();
  if (ash.size() != 3 || bsh.size() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2])
    throw std::invalid_argument("bmm_nt: shape mismatch");
  const int B = ash[0], N = ash[1], K = ash[2], M = bsh[1];
  Tensor<S> out({B, N, M});
  for (int bb = 0; bb < B; ++bb) {
    typename Tape<S>::MMap(out.ptr() + std::int64_t(bb) * N * M, N, M).noalias() =
        typename Tape<S>::CMap(t.val(a.id).ptr() + std::int64_t(bb) * N * K, N, K) *
        typename Tape<S>::CMap(t.val(b.id).ptr() + std::int64_t(bb) * M * K, M, K).transpose();
  }
  int ai = a.id, bi = b.id;
  int id = t.make(std::move(out), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id, B, N, K, M](Tape<S>& tp) {
          for (int bb = 0; bb < B; ++bb) {
            typename Tape<S>::CMap g(tp.grad(id).ptr() + std::int64_t(bb) * N * M, N, M);
            if (tp.needs(ai)) {
              typename Tape<S>::CMap bm(tp.val(bi).ptr() + std::int64_t(bb) * M * K, M, K);
              typename Tape<S>::MMap(tp.grad(ai).ptr() + std::int64_t(bb) * N * K, N, K)
                  .noalias() += g * bm;
            }
            if (tp.needs(bi)) {
              typename Tape<S>::CMap am(tp.val(ai).ptr() + std::int64_t(bb) * N * K, N, K);
              typename Tape<S>::MMap(tp.grad(bi).ptr() + std::int64_t(bb) * M * K, M, K)
                  .noalias() += g.transpose() * am;
            }
          }
        })
      : nullptr;
  return {&t, id};
}

template <class S>
Var<S> reshape(Var<S> x, std::vector<int> sh) {
  Tape<S>& t = *x.tape;
  if (Tensor<S>::count(sh) != t.val(x.id).size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor<S> out = t.val(x.id);
  out.shape = sh;
  int xi = x.id;
  int id = t.make(std::move(out), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        })
      : nullptr;
  return {&t, id};
}

// out[i] = x[map[i]], or 0 where map[i] < 0 (zero padding).
template <class S>
Var<S> gather(Var<S> x, std::shared_ptr<const std::vector<std::int64_t>> map,
              std::vector<int> out_shape) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(out_shape);
  const Tensor<S>& xv = t.val(x.id);
  for (std::int64_t i = 0; i < out.size(); ++i) {
    std::int64_t src = (*map)[i];
    out[i] = src >= 0 ? xv[src] : S(0);
  }
  int xi = x.id;
  int id = t.make(std::move(out), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, map](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t i = 0; i < g.size(); ++i) {
            std::int64_t src = (*map)[i];
            if (src >= 0) gx[src] += g[i];
          }
        })
      : nullptr;
  return {&t, id};
}

// Sparse linear map with fixed fanout F: out[i] = sum_k w[i*F+k] * x[idx[i*F+k]].
// idx entries of -1 contribute zero (used for border handling).
template <class S>
struct LinearMap {
  std::vector<std::int64_t> idx;
  std::vector<S> w;
  int fanout = 0;
  std::vector<int> out_shape;
};

template <class S>
Var<S> apply_linear_map(Var<S> x, std::shared_ptr<const LinearMap<S>> lm) {
  Tape<S>& t = *x.tape;
  Tensor<S> out(lm->out_shape);
  const Tensor<S>& xv = t.val(x.id);
  const int F = lm->fanout;
  for (std::int64_t i = 0; i < out.size(); ++i) {
    S acc = S(0);
    for (int k = 0; k < F; ++k) {
      std::int64_t src = lm->idx[i * F + k];
      if (src >= 0) acc += lm->w[i * F + k] * xv[src];
    }
    out[i] = acc;
  }
  int xi = x.id;
  int id = t.make(std::move(out), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, lm](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          Tensor<S>& gx = tp.grad(xi);
          const int F = lm->fanout;
          for (std::int64_t i = 0; i < g.size(); ++i) {
            for (int k = 0; k < F; ++k) {
              std::int64_t src = lm->idx[i * F + k];
              if (src >= 0) gx[src] += lm->w[i * F + k] * g[i];
            }
          }
        })
      : nullptr;
  return {&t, id};
}

// Softmax over the last dimension of the flat row view.
template <class S>
Var<S> softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = t.val(x.id);
  const int C = out.cols();
  const std::int64_t N = out.rows();
  for (std::int64_t r = 0; r < N; ++r) {
    S* row = out.ptr() + r * C;
    S m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    S z = S(0);
    for (int c = 0; c < C; ++c) {
      row[c] = std::exp(row[c] - m);
      z += row[c];
    }
    for (int c = 0; c < C; ++c) row[c] /= z;
  }
  int xi = x.id;
  int id = t.make(std::move(out), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, N, C](Tape<S>& tp) {
          const Tensor<S>& y = tp.val(id);
          const Tensor<S>& g = tp.grad(id);
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t r = 0; r < N; ++r) {
            const S* yr = y.ptr() + r * C;
            const S* gr = g.ptr() + r * C;
            S dot = S(0);
            for (int c = 0; c < C; ++c) dot += yr[c] * gr[c];
            S* gxr = gx.ptr() + r * C;
            for (int c = 0; c < C; ++c) gxr[c] += yr[c] * (gr[c] - dot);
          }
        })
      : nullptr;
  return {&t, id};
}

// LayerNorm over the last dimension. gamma/beta: (C).
template <class S>
Var<S> layernorm_rows(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x.id);
  const int C = xv.cols();
  const std::int64_t N = xv.rows();
  Tensor<S> out(xv.shape);
  auto xhat = std::make_shared<Tensor<S>>(xv.shape);
  auto rstd = std::make_shared<std::vector<S>>(N);
  const Tensor<S>& gv = t.val(gamma.id);
  const Tensor<S>& bv = t.val(beta.id);
  for (std::int64_t r = 0; r < N; ++r) {
    const S* row = xv.ptr() + r * C;
    S mu = S(0);
    for (int c = 0; c < C; ++c) mu += row[c];
    mu /= C;
    S var = S(0);
    for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= C;
    S rs = S(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int c = 0; c < C; ++c) {
      S xh = (row[c] - mu) * rs;
      (*xhat)[r * C + c] = xh;
      out[r * C + c] = xh * gv[c] + bv[c];
    }
  }
  int xi = x.id, gi = gamma.id, bi = beta.id;
  int id = t.make(std::move(out), {xi, gi, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, gi, bi, id, N, C, xhat, rstd](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          const Tensor<S>& gv = tp.val(gi);
          for (std::int64_t r = 0; r < N; ++r) {
            const S* gr = g.ptr() + r * C;
            const S* xh = xhat->ptr() + r * C;
            if (tp.needs(gi)) {
              Tensor<S>& gg = tp.grad(gi);
              for (int c = 0; c < C; ++c) gg[c] += gr[c] * xh[c];
            }
            if (tp.needs(bi)) {
              Tensor<S>& gb = tp.grad(bi);
              for (int c = 0; c < C; ++c) gb[c] += gr[c];
            }
            if (tp.needs(xi)) {
              S m1 = S(0), m2 = S(0);
              for (int c = 0; c < C; ++c) {
                S dxh = gr[c] * gv[c];
                m1 += dxh;
                m2 += dxh * xh[c];
              }
              m1 /= C;
              m2 /= C;
              Tensor<S>& gx = tp.grad(xi);
              S* gxr = gx.ptr() + r * C;
              const S rs = (*rstd)[r];
              for (int c = 0; c < C; ++c) {
                S dxh = gr[c] * gv[c];
                gxr[c] += rs * (dxh - m1 - xh[c] * m2);
              }
            }
          }
        })
      : nullptr;
  return {&t, id};
}

namespace detail {
// F and D are stateless functors; templating keeps the per-element calls
// direct instead of routing millions of them through std::function.
template <class S, class F, class D>
Var<S> unary(Var<S> x, F f, D dfdx) {
  Tape<S>& t = *x.tape;
  Tensor<S> out = t.val(x.id);
  for (auto& v : out.data) v = f(v);
  int xi = x.id;
  int id = t.make(std::move(out), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, dfdx](Tape<S>& tp) {
          const Tensor<S>& g = tp.grad(id);
          const Tensor<S>& xv = tp.val(xi);
          const Tensor<S>& yv = tp.val(id);
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
        })
      : nullptr;
  return {&t, id};
}
}  // namespace detail

template <class S>
Var<S> gelu(Var<S> x) {
  static const S kInvSqrt2 = S(0.7071067811865475);
  static const S kInvSqrt2Pi = S(0.3989422804014327);
  return detail::unary<S>(
      x, [](S v) { return S(0.5) * v * (S(1) + std::erf(v * kInvSqrt2)); },
      [](S v, S) {
        S cdf = S(0.5) * (S(1) + std::erf(v * kInvSqrt2));
        S pdf = kInvSqrt2Pi * std::exp(S(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <class S>
Var<S> tanh_(Var<S> x) {
  return detail::unary<S>(x, [](S v) { return std::tanh(v); },
                          [](S, S y) { return S(1) - y * y; });
}

template <class S>
Var<S> sigmoid_(Var<S> x) {
  return detail::unary<S>(
      x,
      [](S v) { return v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v)); },
      [](S, S y) { return y * (S(1) - y); });
}

// log(sigmoid(x)) = -softplus(-x), stable for both tails.
template <class S>
Var<S> log_sigmoid(Var<S> x) {
  return detail::unary<S>(
      x,
      [](S v) { return v >= S(0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](S v, S) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        return v >= S(0) ? std::exp(-v) / (S(1) + std::exp(-v)) : S(1) / (S(1) + std::exp(v));
      });
}

template <class S>
Var<S> relu(Var<S> x) {
  return detail::unary<S>(x, [](S v) { return v > S(0) ? v : S(0); },
                          [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  S acc = S(0);
  for (const auto& v : t.val(x.id).data) acc += v;
  int xi = x.id;
  int id = t.make(Tensor<S>::scalar(acc), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id](Tape<S>& tp) {
          S g = tp.grad(id)[0];
          Tensor<S>& gx = tp.grad(xi);
          for (auto& v : gx.data) v += g;
        })
      : nullptr;
  return {&t, id};
}

template <class S>
Var<S> mean_all(Var<S> x) {
  auto n = static_cast<S>(x.value().size());
  return scale(sum_all(x), S(1) / n);
}

// Mean cross-entropy of row-softmax against integer labels.
template <class S>
Var<S> ce_rows(Var<S> logits, std::shared_ptr<const std::vector<int>> labels) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& xv = t.val(logits.id);
  const int C = xv.cols();
  const std::int64_t N = xv.rows();
  if (static_cast<std::int64_t>(labels->size()) != N)
    throw std::invalid_argument("ce_rows: label count mismatch");
  auto probs = std::make_shared<Tensor<S>>(xv.shape);
  S loss = S(0);
  for (std::int64_t r = 0; r < N; ++r) {
    const S* row = xv.ptr() + r * C;
    int y = (*labels)[r];
    if (y < 0 || y >= C) throw std::invalid_argument("ce_rows: label out of range");
    S m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    S z = S(0);
    for (int c = 0; c < C; ++c) z += std::exp(row[c] - m);
    S logz = std::log(z) + m;
    loss += logz - row[y];
    for (int c = 0; c < C; ++c) (*probs)[r * C + c] = std::exp(row[c] - logz);
  }
  loss /= static_cast<S>(N);
  int xi = logits.id;
  int id = t.make(Tensor<S>::scalar(loss), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, probs, labels, N, C](Tape<S>& tp) {
          S g = tp.grad(id)[0] / static_cast<S>(N);
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t r = 0; r < N; ++r) {
            for (int c = 0; c < C; ++c) gx[r * C + c] += g * (*probs)[r * C + c];
            gx[r * C + (*labels)[r]] -= g;
          }
        })
      : nullptr;
  return {&t, id};
}

// Row-wise logsumexp over columns [c0, c1) -> (N, 1).
template <class S>
Var<S> logsumexp_cols(Var<S> x, int c0, int c1) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x.id);
  const int C = xv.cols();
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("logsumexp_cols: bad range");
  const std::int64_t N = xv.rows();
  Tensor<S> out({static_cast<int>(N), 1});
  for (std::int64_t r = 0; r < N; ++r) {
    const S* row = xv.ptr() + r * C;
    S m = row[c0];
    for (int c = c0 + 1; c < c1; ++c) m = std::max(m, row[c]);
    S z = S(0);
    for (int c = c0; c < c1; ++c) z += std::exp(row[c] - m);
    out[r] = m + std::log(z);
  }
  int xi = x.id;
  int id = t.make(std::move(out), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, c0, c1, N, C](Tape<S>& tp) {
          const Tensor<S>& y = tp.val(id);
          const Tensor<S>& g = tp.grad(id);
          const Tensor<S>& xv2 = tp.val(xi);
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t r = 0; r < N; ++r) {
            for (int c = c0; c < c1; ++c)
              gx[r * C + c] += g[r] * std::exp(xv2[r * C + c] - y[r]);
          }
        })
      : nullptr;
  return {&t, id};
}

// Column slice [c0, c1) of the flat row view.
template <class S>
Var<S> select_cols(Var<S> x, int c0, int c1) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = t.val(x.id);
  const int C = xv.cols();
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("select_cols: bad range");
  const std::int64_t N = xv.rows();
  const int W = c1 - c0;
  auto map = std::make_shared<std::vector<std::int64_t>>(N * W);
  for (std::int64_t r = 0; r < N; ++r)
    for (int c = 0; c < W; ++c) (*map)[r * W + c] = r * C + c0 + c;
  std::vector<int> osh(xv.shape.begin(), xv.shape.end() - 1);
  osh.push_back(W);
  return gather(x, map, osh);
}

template <class S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <class S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <class S>
Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }

}  // namespace ops
}  // namespace coseg
