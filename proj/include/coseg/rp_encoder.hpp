#pragma once

#include "coseg/nn.hpp"

namespace coseg {

// Region-aware prompt encoder: mask logits -> dense prompts aligned with the
// image embedding grid. Conv embedding (16x16 stride-16 downsample, LayerNorm,
// GELU, 1x1 expansion), then self-attention over mask tokens and
// cross-attention against the image embedding. Fixed sinusoidal positional
// encodings are added to both token sets.
template <class S>
class RPEncoder {
 public:
  RPEncoder() = default;

  RPEncoder(ParamStore<S>& ps, const std::string& name, int C, int hidden, int n_heads,
            std::mt19937_64& rng)
      : width_(C), hidden_(hidden) {
    conv1_w_ = ps.add(name + ".conv1.w", nn::kaiming<S>({16 * 16, hidden}, 16 * 16, rng));
    conv1_b_ = ps.add(name + ".conv1.b", Tensor<S>::zeros({hidden}));
    norm_ = nn::LayerNorm<S>::create(ps, name + ".norm", hidden);
    conv2_w_ = ps.add(name + ".conv2.w", nn::kaiming<S>({hidden, C}, hidden, rng));
    conv2_b_ = ps.add(name + ".conv2.b", Tensor<S>::zeros({C}));
    self_norm_ = nn::LayerNorm<S>::create(ps, name + ".self_norm", C);
    self_attn_ = nn::Attention<S>::create(ps, name + ".self_attn", C, n_heads, rng);
    cross_norm_ = nn::LayerNorm<S>::create(ps, name + ".cross_norm", C);
    cross_attn_ = nn::Attention<S>::create(ps, name + ".cross_attn", C, n_heads, rng);
  }

  // mu: (H, W, 1) mask logits -> (H/16, W/16, C)
  Var<S> embed_mask(Tape<S>& t, const ParamStore<S>& ps, Var<S> mu) const {
    const auto sh = mu.shape();
    if (sh.size() != 3 || sh[2] != 1 || sh[0] % 16 != 0 || sh[1] % 16 != 0)
      throw std::invalid_argument("embed_mask: logits must be (H,W,1), dims divisible by 16");
    ops::ConvPlan plan = ops::make_conv_plan(sh[0], sh[1], 1, 16, 16, 16, ops::Pad::Zero, false);
    Var<S> m = ops::conv2d(mu, ps.var(t, conv1_w_), ps.var(t, conv1_b_), plan);
    m = ops::gelu(norm_(t, ps, m));
    m = ops::add_bias(ops::matmul(ops::reshape(m, {plan.Ho * plan.Wo, hidden_}),
                                  ps.var(t, conv2_w_)),
                      ps.var(t, conv2_b_));
    return ops::reshape(m, {plan.Ho, plan.Wo, width_});
  }

  // m, z: (h, w, C) -> dense prompt (h, w, C)
  Var<S> region_prompt(Tape<S>& t, const ParamStore<S>& ps, Var<S> m, Var<S> z) const {
    const auto ms = m.shape();
    if (ms != z.shape()) throw std::invalid_argument("region_prompt: grid shape mismatch");
    const int h = ms[0], w = ms[1], C = ms[2];
    const int N = h * w;
    Var<S> pe = ops::constant(t, nn::sincos_pos_enc<S>(h, w, C));
    Var<S> tok = ops::reshape(ops::add(m, pe), {1, N, C});
    Var<S> tn = self_norm_(t, ps, tok);
    tok = ops::add(tok, self_attn_(t, ps, tn, tn));
    Var<S> zt = ops::reshape(ops::add(z, pe), {1, N, C});
    Var<S> g = ops::add(tok, cross_attn_(t, ps, cross_norm_(t, ps, tok), zt));
    return ops::reshape(g, {h, w, C});
  }

  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> mu, Var<S> z) const {
    return region_prompt(t, ps, embed_mask(t, ps, mu), z);
  }

 private:
  int width_ = 0, hidden_ = 0;
  int conv1_w_ = -1, conv1_b_ = -1, conv2_w_ = -1, conv2_b_ = -1;
  nn::LayerNorm<S> norm_, self_norm_, cross_norm_;
  nn::Attention<S> self_attn_, cross_attn_;
};

}  // namespace coseg
