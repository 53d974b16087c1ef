#pragma once

#include "coseg/nn.hpp"

namespace coseg {

template <class S>
struct DecoderOutput {
  Var<S> sem_logits;      // (H, W, K+1)
  Var<S> tissue_binary;   // (H, W, 1): logsumexp(foreground classes) - background
  Var<S> nuclei_binary;   // (H, W, 1)
  Var<S> hv;              // (H, W, 2), tanh-bounded
};

struct DecoderConfig {
  int width = 128;       // must match the encoder output width
  int n_classes = 3;     // K tissue classes; tissue head emits K+1 maps
  int n_heads = 1;
  int depth = 1;         // refine blocks per head
  bool share_pixel_decoder = false;
  // Initial value of the learnable per-head gate on the dense prompt. Small
  // so a freshly initialized prompt path starts close to the promptless
  // decoder and its influence is grown (or suppressed) by training.
  double prompt_gate_init = 0.02;
};

// Mutual prompt mask decoder. Each head refines its queries against the image
// embedding fused with the OTHER task's dense prompt, builds a task-specific
// embedding by reverse cross-attention, upsamples it 4x and dots it with
// per-query hypernetwork weights.
template <class S>
class MPDecoder {
 public:
  MPDecoder() = default;

  MPDecoder(ParamStore<S>& ps, const DecoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    const int C = cfg.width;
    tissue_ = Head::create(ps, "dec.tissue", C, cfg.n_classes + 1, cfg, rng);
    nuclei_ = Head::create(ps, "dec.nuclei", C, 3, cfg, rng);
    tissue_pix_ = Pixel::create(ps, "dec.tissue.pix", C, rng);
    nuclei_pix_ = cfg.share_pixel_decoder ? tissue_pix_ : Pixel::create(ps, "dec.nuclei.pix", C, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  Var<S> refine_queries(Tape<S>& t, const ParamStore<S>& ps, bool tissue_head, Var<S> z,
                        Var<S> g_other) const {
    const Head& h = tissue_head ? tissue_ : nuclei_;
    Var<S> fused = fuse(t, ps, h, z, g_other);
    return h.refine(t, ps, fused);
  }

  Var<S> task_embedding(Tape<S>& t, const ParamStore<S>& ps, bool tissue_head, Var<S> z,
                        Var<S> g_other, Var<S> q_ref) const {
    const Head& h = tissue_head ? tissue_ : nuclei_;
    return h.embed(t, ps, fuse(t, ps, h, z, g_other), q_ref);
  }

  // h_grid: (h, w, C), q_ref: (1, Nq, C) -> (H, W, Nq)
  Var<S> predict_masks(Tape<S>& t, const ParamStore<S>& ps, bool tissue_head, Var<S> h_grid,
                       Var<S> q_ref, int H, int W) const {
    const Head& head = tissue_head ? tissue_ : nuclei_;
    const Pixel& pix = tissue_head ? tissue_pix_ : nuclei_pix_;
    const auto gs = h_grid.shape();
    const int C = cfg_.width, C4 = C / 4;
    Var<S> up = pix.up(t, ps, h_grid);  // (4h, 4w, C/4)
    Var<S> hyper = head.hyper(t, ps, ops::reshape(q_ref, {head.n_queries, C}));  // (Nq, C/4)
    Var<S> maps = ops::matmul(ops::reshape(up, {gs[0] * 4 * gs[1] * 4, C4}),
                              ops::transpose2d(hyper));
    maps = ops::reshape(maps, {gs[0] * 4, gs[1] * 4, head.n_queries});
    auto plan = ops::make_bilinear_plan<S>(gs[0] * 4, gs[1] * 4, head.n_queries, H, W);
    return ops::apply_linear_map(maps, std::shared_ptr<const ops::LinearMap<S>>(plan));
  }

  // Full decode. cross_guidance=false routes each head's own prompt instead of
  // the other task's.
  DecoderOutput<S> decode(Tape<S>& t, const ParamStore<S>& ps, Var<S> z, Var<S> g_tissue,
                          Var<S> g_nuclei, int H, int W, bool cross_guidance = true) const {
    const int K = cfg_.n_classes;
    Var<S> g_for_tissue = cross_guidance ? g_nuclei : g_tissue;
    Var<S> g_for_nuclei = cross_guidance ? g_tissue : g_nuclei;

    Var<S> qt = refine_queries(t, ps, true, z, g_for_tissue);
    Var<S> ht = task_embedding(t, ps, true, z, g_for_tissue, qt);
    Var<S> tmaps = predict_masks(t, ps, true, ht, qt, H, W);  // (H, W, K+1)

    Var<S> qn = refine_queries(t, ps, false, z, g_for_nuclei);
    Var<S> hn = task_embedding(t, ps, false, z, g_for_nuclei, qn);
    Var<S> nmaps = predict_masks(t, ps, false, hn, qn, H, W);  // (H, W, 3)

    DecoderOutput<S> out;
    out.sem_logits = tmaps;
    out.tissue_binary =
        ops::sub(ops::reshape(ops::logsumexp_cols(tmaps, 1, K + 1), {H, W, 1}),
                 ops::reshape(ops::select_cols(tmaps, 0, 1), {H, W, 1}));
    out.nuclei_binary = ops::reshape(ops::select_cols(nmaps, 0, 1), {H, W, 1});
    out.hv = ops::reshape(ops::tanh_(ops::select_cols(nmaps, 1, 3)), {H, W, 2});
    return out;
  }

 private:
  struct Head;

  // Residual prompt injection, scaled by the head's learnable gate.
  static Var<S> fuse(Tape<S>& t, const ParamStore<S>& ps, const Head& h, Var<S> z, Var<S> g) {
    if (z.shape() != g.shape())
      throw std::invalid_argument("decode: prompt grid must match image embedding");
    return ops::add(z, ops::scale_by(g, ps.var(t, h.gate)));
  }

  struct Head {
    int n_queries = 0;
    int query_tokens = -1;
    int gate = -1;  // learnable scalar on the injected prompt
    struct RefineBlock {
      nn::LayerNorm<S> norm_self, norm_cross, norm_mlp;
      nn::Attention<S> self_attn, cross_attn;
      nn::Mlp<S> mlp;
    };
    std::vector<RefineBlock> blocks;
    nn::Attention<S> reverse_attn;
    nn::Linear<S> hyper1, hyper2;

    static Head create(ParamStore<S>& ps, const std::string& name, int C, int n_queries,
                       const DecoderConfig& cfg, std::mt19937_64& rng) {
      Head h;
      h.n_queries = n_queries;
      h.query_tokens = ps.add(name + ".queries",
                              Tensor<S>::randn({1, n_queries, C}, rng, S(0.02)));
      for (int d = 0; d < cfg.depth; ++d) {
        std::string bn = name + ".ref" + std::to_string(d);
        RefineBlock b;
        b.norm_self = nn::LayerNorm<S>::create(ps, bn + ".norm_self", C);
        b.norm_cross = nn::LayerNorm<S>::create(ps, bn + ".norm_cross", C);
        b.norm_mlp = nn::LayerNorm<S>::create(ps, bn + ".norm_mlp", C);
        b.self_attn = nn::Attention<S>::create(ps, bn + ".self", C, cfg.n_heads, rng);
        b.cross_attn = nn::Attention<S>::create(ps, bn + ".cross", C, cfg.n_heads, rng);
        b.mlp = nn::Mlp<S>::create(ps, bn + ".mlp", C, 4 * C, rng);
        h.blocks.push_back(std::move(b));
      }
      h.gate = ps.add(name + ".gate",
                      Tensor<S>::full({1}, static_cast<S>(cfg.prompt_gate_init)));
      h.reverse_attn = nn::Attention<S>::create(ps, name + ".reverse", C, cfg.n_heads, rng);
      h.hyper1 = nn::Linear<S>::create(ps, name + ".hyper1", C, C, rng);
      h.hyper2 = nn::Linear<S>::create(ps, name + ".hyper2", C, C / 4, rng);
      return h;
    }

    // fused: (h, w, C) -> refined queries (1, Nq, C)
    Var<S> refine(Tape<S>& t, const ParamStore<S>& ps, Var<S> fused) const {
      const auto fs = fused.shape();
      Var<S> tok = ops::reshape(fused, {1, fs[0] * fs[1], fs[2]});
      Var<S> q = ps.var(t, query_tokens);
      for (const auto& b : blocks) {
        Var<S> n = b.norm_self(t, ps, q);
        q = ops::add(q, b.self_attn(t, ps, n, n));
        q = ops::add(q, b.cross_attn(t, ps, b.norm_cross(t, ps, q), tok));
        q = ops::add(q, b.mlp(t, ps, b.norm_mlp(t, ps, q)));
      }
      return q;
    }

    // Reverse cross-attention: grid tokens attend to the refined queries.
    Var<S> embed(Tape<S>& t, const ParamStore<S>& ps, Var<S> fused, Var<S> q_ref) const {
      const auto fs = fused.shape();
      Var<S> tok = ops::reshape(fused, {1, fs[0] * fs[1], fs[2]});
      Var<S> h = reverse_attn(t, ps, tok, q_ref);
      return ops::reshape(h, fs);
    }

    Var<S> hyper(Tape<S>& t, const ParamStore<S>& ps, Var<S> q) const {
      return hyper2(t, ps, ops::gelu(hyper1(t, ps, q)));
    }
  };

  struct Pixel {
    nn::LayerNorm<S> norm1, norm2;
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    int C = 0;
    mutable std::shared_ptr<std::vector<std::int64_t>> map1, map2;

    static Pixel create(ParamStore<S>& ps, const std::string& name, int C, std::mt19937_64& rng) {
      Pixel p;
      p.C = C;
      p.w1 = ps.add(name + ".up1.w", nn::kaiming<S>({C, (C / 2) * 4}, C, rng));
      p.b1 = ps.add(name + ".up1.b", Tensor<S>::zeros({C / 2}));
      p.w2 = ps.add(name + ".up2.w", nn::kaiming<S>({C / 2, (C / 4) * 4}, C / 2, rng));
      p.b2 = ps.add(name + ".up2.b", Tensor<S>::zeros({C / 4}));
      p.norm1 = nn::LayerNorm<S>::create(ps, name + ".norm1", C / 2);
      p.norm2 = nn::LayerNorm<S>::create(ps, name + ".norm2", C / 4);
      return p;
    }

    // (h, w, C) -> (4h, 4w, C/4)
    Var<S> up(Tape<S>& t, const ParamStore<S>& ps, Var<S> x) const {
      x = ops::conv_transpose_2x2(x, ps.var(t, w1), ps.var(t, b1), C / 2, map1);
      x = ops::gelu(norm1(t, ps, x));
      x = ops::conv_transpose_2x2(x, ps.var(t, w2), ps.var(t, b2), C / 4, map2);
      return ops::gelu(norm2(t, ps, x));
    }
  };

  DecoderConfig cfg_;
  Head tissue_, nuclei_;
  Pixel tissue_pix_, nuclei_pix_;
};

}  // namespace coseg
