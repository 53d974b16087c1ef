#pragma once

#include "coseg/encoder.hpp"
#include "coseg/mp_decoder.hpp"
#include "coseg/rp_encoder.hpp"

namespace coseg {

struct ModelConfig {
  EncoderConfig enc;
  DecoderConfig dec;
  int rp_hidden = 16;
  bool share_rp_weights = false;
  bool use_peft = false;
  int seed = 0;

  void validate() const {
    enc.validate();
    if (dec.width != enc.out_width())
      throw std::invalid_argument("model: decoder width must equal encoder output width");
    if (dec.width % 4 != 0) throw std::invalid_argument("model: width must be divisible by 4");
  }
};

template <class S>
struct CoSegOutput {
  DecoderOutput<S> forward1;
  DecoderOutput<S> forward2;
  Var<S> g_tissue, g_nuclei;  // invalid when prompts are disabled
};

struct ForwardOptions {
  bool use_prompts = true;
  bool cross_guidance = true;
  bool detach_between_forwards = false;
};

template <class S>
class CoSegModel {
 public:
  ParamStore<S> store;

  explicit CoSegModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(0x5eedULL + static_cast<unsigned long long>(cfg.seed));
    encoder_ = Encoder<S>(store, cfg.enc, rng);
    rp_sem_ = RPEncoder<S>(store, "rp.sem", cfg.dec.width, cfg.rp_hidden, cfg.dec.n_heads, rng);
    rp_ins_ = cfg.share_rp_weights
                  ? rp_sem_
                  : RPEncoder<S>(store, "rp.ins", cfg.dec.width, cfg.rp_hidden, cfg.dec.n_heads,
                                 rng);
    decoder_ = MPDecoder<S>(store, cfg.dec, rng);
    if (cfg.use_peft)
      encoder_.attach_peft(store, cfg.enc.lora_rank, cfg.enc.adapter_bottleneck, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  Encoder<S>& encoder() { return encoder_; }
  const Encoder<S>& encoder() const { return encoder_; }
  MPDecoder<S>& decoder() { return decoder_; }
  const MPDecoder<S>& decoder() const { return decoder_; }
  RPEncoder<S>& rp_sem() { return rp_sem_; }
  RPEncoder<S>& rp_ins() { return rp_ins_; }

  long encode_calls() const { return encode_calls_; }
  void reset_encode_calls() { encode_calls_ = 0; }

  Var<S> encode(Tape<S>& t, Var<S> image) const {
    ++encode_calls_;
    return encoder_(t, store, image);
  }

  DecoderOutput<S> decode_promptless(Tape<S>& t, Var<S> z, int H, int W) const {
    Var<S> zero = zero_prompt(t, z);
    return decoder_.decode(t, store, z, zero, zero, H, W, true);
  }

  // The co-segmentation two-forward pass. The encoder runs exactly once; the
  // decoder heads share parameters between both forwards.
  CoSegOutput<S> forward_two_stage(Tape<S>& t, Var<S> image, const ForwardOptions& opt) const {
    const auto sh = image.shape();
    const int H = sh[0], W = sh[1];
    Var<S> z = encode(t, image);
    Var<S> zero = zero_prompt(t, z);
    CoSegOutput<S> out;
    out.forward1 = decoder_.decode(t, store, z, zero, zero, H, W, opt.cross_guidance);
    if (!opt.use_prompts) {
      out.forward2 = out.forward1;
      return out;
    }
    Var<S> mu_t = opt.detach_between_forwards ? ops::stop_grad(out.forward1.tissue_binary)
                                              : out.forward1.tissue_binary;
    Var<S> mu_n = opt.detach_between_forwards ? ops::stop_grad(out.forward1.nuclei_binary)
                                              : out.forward1.nuclei_binary;
    out.g_tissue = rp_sem_(t, store, mu_t, z);
    out.g_nuclei = rp_ins_(t, store, mu_n, z);
    out.forward2 =
        decoder_.decode(t, store, z, out.g_tissue, out.g_nuclei, H, W, opt.cross_guidance);
    return out;
  }

 private:
  static Var<S> zero_prompt(Tape<S>& t, Var<S> z) {
    return ops::constant(t, Tensor<S>::zeros(z.shape()));
  }

  ModelConfig cfg_;
  Encoder<S> encoder_;
  RPEncoder<S> rp_sem_, rp_ins_;
  MPDecoder<S> decoder_;
  mutable long encode_calls_ = 0;
};

}  // namespace coseg
