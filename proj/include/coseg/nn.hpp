#pragma once

#include <string>

#include "coseg/convops.hpp"

namespace coseg {

// Named parameter registry shared by every module of a model. Parameters are
// attached to a fresh tape at the start of each forward pass; gradients are
// read back from the tape after backward().
template <class S>
class ParamStore {
 public:
  struct Param {
    std::string name;
    Tensor<S> value;
    bool trainable = true;
    int var = -1;
  };

  int add(std::string name, Tensor<S> v, bool trainable = true) {
    params_.push_back(Param{std::move(name), std::move(v), trainable, -1});
    return static_cast<int>(params_.size()) - 1;
  }

  void attach(Tape<S>& t) {
    for (auto& p : params_) p.var = t.leaf(p.value, grads_enabled_ && p.trainable);
  }

  // Grad-check needs gradients for frozen parameters too.
  void attach_all_grads(Tape<S>& t) {
    for (auto& p : params_) p.var = t.leaf(p.value, true);
  }

  void set_grads_enabled(bool on) { grads_enabled_ = on; }

  Var<S> var(Tape<S>& t, int idx) const { return {&t, params_[idx].var}; }

  Param& at(int idx) { return params_[idx]; }
  const Param& at(int idx) const { return params_[idx]; }
  int count() const { return static_cast<int>(params_.size()); }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  std::int64_t trainable_scalars() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }

 private:
  std::vector<Param> params_;
  bool grads_enabled_ = true;
};

namespace nn {

template <class S>
Tensor<S> kaiming(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  return Tensor<S>::randn(std::move(shape), rng, static_cast<S>(std::sqrt(2.0 / fan_in)));
}

// Linear layer with optional LoRA pair (B zero-initialized so attachment is a
// no-op until trained).
template <class S>
struct Linear {
  int w = -1, b = -1;
  int in = 0, out = 0;
  int lora_a = -1, lora_b = -1;

  static Linear create(ParamStore<S>& ps, const std::string& name, int in, int out,
                       std::mt19937_64& rng, bool trainable = true) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = ps.add(name + ".w", Tensor<S>::randn({in, out}, rng, static_cast<S>(std::sqrt(1.0 / in))),
                 trainable);
    l.b = ps.add(name + ".b", Tensor<S>::zeros({out}), trainable);
    return l;
  }

  void add_lora(ParamStore<S>& ps, const std::string& name, int rank, std::mt19937_64& rng) {
    lora_a = ps.add(name + ".lora_a",
                    Tensor<S>::randn({in, rank}, rng, static_cast<S>(std::sqrt(1.0 / in))), true);
    lora_b = ps.add(name + ".lora_b", Tensor<S>::zeros({rank, out}), true);
  }

  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> x) const {
    Var<S> y = ops::add_bias(ops::matmul(x, ps.var(t, w)), ps.var(t, b));
    if (lora_a >= 0)
      y = ops::add(y, ops::matmul(ops::matmul(x, ps.var(t, lora_a)), ps.var(t, lora_b)));
    return y;
  }
};

template <class S>
struct LayerNorm {
  int gamma = -1, beta = -1;

  static LayerNorm create(ParamStore<S>& ps, const std::string& name, int C,
                          bool trainable = true) {
    LayerNorm ln;
    ln.gamma = ps.add(name + ".gamma", Tensor<S>::full({C}, S(1)), trainable);
    ln.beta = ps.add(name + ".beta", Tensor<S>::zeros({C}), trainable);
    return ln;
  }

  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> x) const {
    return ops::layernorm_rows(x, ps.var(t, gamma), ps.var(t, beta));
  }
};

// Bottleneck adapter, up-projection zero-initialized (residual no-op at init).
template <class S>
struct Adapter {
  Linear<S> down, up;

  static Adapter create(ParamStore<S>& ps, const std::string& name, int C, int bottleneck,
                        std::mt19937_64& rng) {
    Adapter a;
    a.down = Linear<S>::create(ps, name + ".down", C, bottleneck, rng, true);
    a.up = Linear<S>::create(ps, name + ".up", bottleneck, C, rng, true);
    auto& w = ps.at(a.up.w).value;
    std::fill(w.data.begin(), w.data.end(), S(0));
    return a;
  }

  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> x) const {
    return ops::add(x, up(t, ps, ops::gelu(down(t, ps, x))));
  }
};

// Scaled dot-product attention with q/k/v/out projections.
// q_in: (B, Nq, C), kv_in: (B, Nk, C) -> (B, Nq, C). n_heads must divide C.
template <class S>
struct Attention {
  Linear<S> q, k, v, o;
  int heads = 1;
  int width = 0;

  static Attention create(ParamStore<S>& ps, const std::string& name, int C, int n_heads,
                          std::mt19937_64& rng, bool trainable = true) {
    Attention a;
    a.width = C;
    a.heads = n_heads;
    a.q = Linear<S>::create(ps, name + ".q", C, C, rng, trainable);
    a.k = Linear<S>::create(ps, name + ".k", C, C, rng, trainable);
    a.v = Linear<S>::create(ps, name + ".v", C, C, rng, trainable);
    a.o = Linear<S>::create(ps, name + ".o", C, C, rng, trainable);
    return a;
  }

  void add_lora(ParamStore<S>& ps, const std::string& name, int rank, std::mt19937_64& rng) {
    q.add_lora(ps, name + ".q", rank, rng);
    k.add_lora(ps, name + ".k", rank, rng);
    v.add_lora(ps, name + ".v", rank, rng);
    o.add_lora(ps, name + ".o", rank, rng);
  }

  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> q_in, Var<S> kv_in) const {
    const auto qs = q_in.shape();
    const auto ks = kv_in.shape();
    const int B = qs[0], Nq = qs[1], Nk = ks[1], C = width;
    const int dh = C / heads;
    Var<S> qq = q(t, ps, q_in);
    Var<S> kk = k(t, ps, kv_in);
    Var<S> vv = v(t, ps, kv_in);
    if (heads > 1) {
      qq = split_heads(qq, B, Nq);
      kk = split_heads(kk, B, Nk);
      vv = split_heads(vv, B, Nk);
    } else {
      qq = ops::reshape(qq, {B, Nq, C});
      kk = ops::reshape(kk, {B, Nk, C});
      vv = ops::reshape(vv, {B, Nk, C});
    }
    Var<S> scores = ops::scale(ops::bmm_nt(qq, kk), static_cast<S>(1.0 / std::sqrt((double)dh)));
    Var<S> attn = ops::softmax_rows(scores);
    Var<S> out = ops::bmm_nn(attn, vv);
    out = heads > 1 ? merge_heads(out, B, Nq) : ops::reshape(out, {B, Nq, C});
    return o(t, ps, out);
  }

 private:
  // (B, N, C) -> (B*heads, N, dh)
  Var<S> split_heads(Var<S> x, int B, int N) const {
    const int C = width, h = heads, dh = C / h;
    auto map = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::int64_t>(B) * N * C);
    std::int64_t idx = 0;
    for (int b = 0; b < B; ++b)
      for (int hh = 0; hh < h; ++hh)
        for (int n = 0; n < N; ++n)
          for (int d = 0; d < dh; ++d)
            (*map)[idx++] = (static_cast<std::int64_t>(b) * N + n) * C + hh * dh + d;
    return ops::gather(x, map, {B * h, N, dh});
  }
  // (B*heads, N, dh) -> (B, N, C)
  Var<S> merge_heads(Var<S> x, int B, int N) const {
    const int C = width, h = heads, dh = C / h;
    auto map = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::int64_t>(B) * N * C);
    std::int64_t idx = 0;
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n)
        for (int hh = 0; hh < h; ++hh)
          for (int d = 0; d < dh; ++d)
            (*map)[idx++] =
                ((static_cast<std::int64_t>(b) * h + hh) * N + n) * dh + d;
    return ops::gather(x, map, {B, N, C});
  }
};

template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  static Mlp create(ParamStore<S>& ps, const std::string& name, int C, int hidden,
                    std::mt19937_64& rng, bool trainable = true) {
    Mlp m;
    m.fc1 = Linear<S>::create(ps, name + ".fc1", C, hidden, rng, trainable);
    m.fc2 = Linear<S>::create(ps, name + ".fc2", hidden, C, rng, trainable);
    return m;
  }

  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> x) const {
    return fc2(t, ps, ops::gelu(fc1(t, ps, x)));
  }
};

// Pre-norm transformer block with optional windowed self-attention and
// optional PEFT adapter after the FFN.
template <class S>
struct Block {
  LayerNorm<S> norm1, norm2;
  Attention<S> attn;
  Mlp<S> mlp;
  int window = 0;  // 0 = full attention over all tokens
  bool has_adapter = false;
  Adapter<S> adapter;

  static Block create(ParamStore<S>& ps, const std::string& name, int C, int heads,
                      int mlp_ratio, int window, std::mt19937_64& rng, bool trainable = true) {
    Block b;
    b.norm1 = LayerNorm<S>::create(ps, name + ".norm1", C, trainable);
    b.norm2 = LayerNorm<S>::create(ps, name + ".norm2", C, trainable);
    b.attn = Attention<S>::create(ps, name + ".attn", C, heads, rng, trainable);
    b.mlp = Mlp<S>::create(ps, name + ".mlp", C, C * mlp_ratio, rng, trainable);
    b.window = window;
    return b;
  }

  // x: (H, W, C) grid tokens
  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> x) const {
    const auto sh = x.shape();
    const int H = sh[0], W = sh[1], C = sh[2];
    int win = window;
    if (win > 0) {
      while (win > 1 && (H % win != 0 || W % win != 0)) --win;
    }
    Var<S> h = norm1(t, ps, x);
    Var<S> a;
    if (win > 1 && (H > win || W > win)) {
      const int nwin = (H / win) * (W / win);
      Var<S> parts = ops::gather(h, ops::make_window_map(H, W, C, win, false),
                                 {nwin, win * win, C});
      Var<S> att = attn(t, ps, parts, parts);
      a = ops::gather(att, ops::make_window_map(H, W, C, win, true), {H, W, C});
    } else {
      Var<S> tok = ops::reshape(h, {1, H * W, C});
      a = ops::reshape(attn(t, ps, tok, tok), {H, W, C});
    }
    x = ops::add(x, a);
    Var<S> m = mlp(t, ps, norm2(t, ps, x));
    x = ops::add(x, m);
    if (has_adapter) x = adapter(t, ps, x);
    return x;
  }
};

// Fixed 2-D sinusoidal positional encoding over an (H, W) grid with C channels.
template <class S>
Tensor<S> sincos_pos_enc(int H, int W, int C) {
  Tensor<S> pe({H, W, C});
  const int half = C / 2;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      S* row = pe.ptr() + (static_cast<std::int64_t>(y) * W + x) * C;
      for (int c = 0; c < half; ++c) {
        double freq = std::pow(10000.0, -2.0 * (c / 2) / half);
        double v = (c % 2 == 0) ? std::sin(x * freq) : std::cos(x * freq);
        row[c] = static_cast<S>(v);
      }
      for (int c = half; c < C; ++c) {
        int cc = c - half;
        double freq = std::pow(10000.0, -2.0 * (cc / 2) / half);
        double v = (cc % 2 == 0) ? std::sin(y * freq) : std::cos(y * freq);
        row[c] = static_cast<S>(v);
      }
    }
  }
  return pe;
}

}  // namespace nn
}  // namespace coseg
