#pragma once

#include <stdexcept>

#include "coseg/nn.hpp"

namespace coseg {

struct EncoderConfig {
  int patch_size = 4;
  std::vector<int> stage_depths{1, 1, 2};
  std::vector<int> stage_widths{32, 64, 128};
  int window_size = 4;
  int n_heads = 1;
  int mlp_ratio = 4;
  int lora_rank = 4;
  int adapter_bottleneck = 8;
  bool freeze_base = false;

  int out_width() const { return stage_widths.back(); }
  int total_stride() const {
    int s = patch_size;
    for (std::size_t i = 1; i < stage_depths.size(); ++i) s *= 2;
    return s;
  }
  void validate() const {
    if (stage_depths.size() != stage_widths.size() || stage_depths.empty())
      throw std::invalid_argument("encoder: stage depths/widths mismatch");
    if (total_stride() != 16)
      throw std::invalid_argument("encoder: cumulative stride must be 16");
  }
};

// Hierarchical windowed-attention image encoder. Patch embed at stride
// `patch_size`, then 2x downsampling between stages for a total stride of 16.
template <class S>
class Encoder {
 public:
  Encoder() = default;

  Encoder(ParamStore<S>& ps, const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    const bool tr = !cfg.freeze_base;
    const int p = cfg.patch_size;
    patch_w_ = ps.add("enc.patch.w",
                      nn::kaiming<S>({p * p * 3, cfg.stage_widths[0]}, p * p * 3, rng), tr);
    patch_b_ = ps.add("enc.patch.b", Tensor<S>::zeros({cfg.stage_widths[0]}), tr);
    patch_norm_ = nn::LayerNorm<S>::create(ps, "enc.patch.norm", cfg.stage_widths[0], tr);
    for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
      if (s > 0) {
        int cin = cfg.stage_widths[s - 1], cout = cfg.stage_widths[s];
        merge_w_.push_back(ps.add("enc.merge" + std::to_string(s) + ".w",
                                  nn::kaiming<S>({4 * cin, cout}, 4 * cin, rng), tr));
        merge_b_.push_back(ps.add("enc.merge" + std::to_string(s) + ".b",
                                  Tensor<S>::zeros({cout}), tr));
        merge_norm_.push_back(
            nn::LayerNorm<S>::create(ps, "enc.merge" + std::to_string(s) + ".norm", cout, tr));
      }
      std::vector<nn::Block<S>> stage;
      for (int d = 0; d < cfg.stage_depths[s]; ++d) {
        stage.push_back(nn::Block<S>::create(
            ps, "enc.s" + std::to_string(s) + ".b" + std::to_string(d), cfg.stage_widths[s],
            cfg.n_heads, cfg.mlp_ratio, cfg.window_size, rng, tr));
      }
      stages_.push_back(std::move(stage));
    }
  }

  // LoRA on every attention projection, adapters after every FFN. Zero-init of
  // the up-projections keeps outputs identical until the new weights train.
  void attach_peft(ParamStore<S>& ps, int rank, int bottleneck, std::mt19937_64& rng) {
    if (rank < 1 || bottleneck < 1)
      throw std::invalid_argument("attach_peft: rank and bottleneck must be >= 1");
    if (peft_attached_) throw std::logic_error("attach_peft: already attached");
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t d = 0; d < stages_[s].size(); ++d) {
        std::string name = "enc.s" + std::to_string(s) + ".b" + std::to_string(d);
        stages_[s][d].attn.add_lora(ps, name + ".attn", rank, rng);
        stages_[s][d].adapter =
            nn::Adapter<S>::create(ps, name + ".adapter", cfg_.stage_widths[s], bottleneck, rng);
        stages_[s][d].has_adapter = true;
      }
    }
    peft_attached_ = true;
  }

  bool peft_attached() const { return peft_attached_; }
  const EncoderConfig& config() const { return cfg_; }

  // image: (H, W, 3) in [0,1] -> (H/16, W/16, C)
  Var<S> operator()(Tape<S>& t, const ParamStore<S>& ps, Var<S> image) const {
    const auto sh = image.shape();
    if (sh.size() != 3 || sh[2] != 3 || sh[0] % 16 != 0 || sh[1] % 16 != 0)
      throw std::invalid_argument("encode: image dims must be (H,W,3) with H,W divisible by 16");
    const int p = cfg_.patch_size;
    ops::ConvPlan plan = ops::make_conv_plan(sh[0], sh[1], 3, p, p, p, ops::Pad::Zero, false);
    Var<S> x = ops::conv2d(image, ps.var(t, patch_w_), ps.var(t, patch_b_), plan);
    x = patch_norm_(t, ps, x);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) {
        const auto xs = x.shape();
        ops::ConvPlan mp =
            ops::make_conv_plan(xs[0], xs[1], xs[2], 2, 2, 2, ops::Pad::Zero, false);
        x = ops::conv2d(x, ps.var(t, merge_w_[s - 1]), ps.var(t, merge_b_[s - 1]), mp);
        x = merge_norm_[s - 1](t, ps, x);
      }
      for (const auto& blk : stages_[s]) x = blk(t, ps, x);
    }
    return x;
  }

 private:
  EncoderConfig cfg_;
  int patch_w_ = -1, patch_b_ = -1;
  nn::LayerNorm<S> patch_norm_;
  std::vector<int> merge_w_, merge_b_;
  std::vector<nn::LayerNorm<S>> merge_norm_;
  std::vector<std::vector<nn::Block<S>>> stages_;
  bool peft_attached_ = false;
};

template <class S>
double trainable_fraction(const ParamStore<S>& ps) {
  const auto total = ps.total_scalars();
  return total == 0 ? 0.0 : static_cast<double>(ps.trainable_scalars()) / total;
}

}  // namespace coseg
