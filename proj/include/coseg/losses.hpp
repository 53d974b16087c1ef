#pragma once

#include "coseg/model.hpp"
#include "coseg/sobel.hpp"

namespace coseg {

struct LossWeights {
  double lambda1 = 2.0;
  double lambda2 = 1.0;
};

// Supervision targets for one sample. Semantic labels are row-major H*W ints
// in {0..K}; binary masks and HV maps are dense float tensors.
template <class S>
struct Targets {
  int H = 0, W = 0, K = 0;
  std::shared_ptr<std::vector<int>> semantic;  // (H*W), multi-class
  Tensor<S> tissue_fg;                         // (H, W, 1) in {0,1}
  Tensor<S> nuclei_fg;                         // (H, W, 1) in {0,1}
  Tensor<S> hv;                                // (H, W, 2) in [-1,1]
};

template <class S>
struct LossReportT {
  double prior_sem = 0, prior_ins = 0, seg_sem = 0, seg_ins = 0, total = 0;
  Var<S> total_var;
};

namespace losses {

constexpr double kDiceSmooth = 1.0;
constexpr double kFocalGamma = 2.0;

// Scalar division node.
template <class S>
Var<S> detail_div(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  S av = t.val(a.id)[0], bv = t.val(b.id)[0];
  int ai = a.id, bi = b.id;
  int id = t.make(Tensor<S>::scalar(av / bv), {ai, bi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([ai, bi, id](Tape<S>& tp) {
          S g = tp.grad(id)[0];
          S a2 = tp.val(ai)[0], b2 = tp.val(bi)[0];
          if (tp.needs(ai)) tp.grad(ai)[0] += g / b2;
          if (tp.needs(bi)) tp.grad(bi)[0] -= g * a2 / (b2 * b2);
        })
      : nullptr;
  return {&t, id};
}

// Soft Dice on given probability/target column pair: 1 - (2*sum(pg)+eps)/(sum p + sum g + eps)
template <class S>
Var<S> soft_dice_term(Var<S> probs, Var<S> gt) {
  Tape<S>& t = *probs.tape;
  Var<S> inter = ops::sum_all(ops::mul(probs, gt));
  Var<S> denom = ops::add(ops::sum_all(probs), ops::sum_all(gt));
  // 1 - (2i+s)/(d+s): compute via scalar graph
  Var<S> num = ops::add(ops::scale(inter, S(2)),
                        ops::constant(t, Tensor<S>::scalar(S(kDiceSmooth))));
  Var<S> den = ops::add(denom, ops::constant(t, Tensor<S>::scalar(S(kDiceSmooth))));
  // a/b via exp(log a - log b); values are strictly positive with the smooth term
  Var<S> ratio = detail_div(num, den);
  return ops::sub(ops::constant(t, Tensor<S>::scalar(S(1))), ratio);
}

// CE + soft Dice for multi-class semantic logits (H, W, K+1). Fused into one
// tape node: the pixel losses dominate the training step, so the generic op
// graph is too slow here.
template <class S>
Var<S> semantic_multiclass(Var<S> logits, const Targets<S>& tg) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& xv = t.val(logits.id);
  const int C = xv.cols();
  const std::int64_t N = xv.rows();
  auto labels = tg.semantic;
  for (int v : *labels)
    if (v < 0 || v >= C) throw std::invalid_argument("loss_semantic: label out of range");

  auto probs = std::make_shared<Tensor<S>>(std::vector<int>{static_cast<int>(N), C});
  auto inter = std::make_shared<std::vector<double>>(C, 0.0);
  auto denom = std::make_shared<std::vector<double>>(C, 0.0);
  double ce = 0;
  for (std::int64_t r = 0; r < N; ++r) {
    const S* row = xv.ptr() + r * C;
    S* pr = probs->ptr() + r * C;
    S m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0;
    for (int c = 0; c < C; ++c) {
      pr[c] = std::exp(row[c] - m);
      z += pr[c];
    }
    for (int c = 0; c < C; ++c) pr[c] = static_cast<S>(pr[c] / z);
    int l = (*labels)[r];
    ce -= std::log(std::max(static_cast<double>(pr[l]), 1e-300));
    for (int c = 0; c < C; ++c) (*denom)[c] += pr[c];
    (*inter)[l] += pr[l];
    (*denom)[l] += 1.0;
  }
  ce /= static_cast<double>(N);
  double dice = 0;
  for (int c = 0; c < C; ++c)
    dice += 1.0 - (2.0 * (*inter)[c] + kDiceSmooth) / ((*denom)[c] + kDiceSmooth);
  dice /= C;

  int xi = logits.id;
  int id = t.make(Tensor<S>::scalar(static_cast<S>(ce + dice)), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, probs, labels, inter, denom, N, C](Tape<S>& tp) {
          const S g = tp.grad(id)[0];
          Tensor<S>& gx = tp.grad(xi);
          std::vector<double> dpd(C);  // d(mean dice)/d p_rc, row-independent part
          std::vector<double> a(C), b(C);
          for (int c = 0; c < C; ++c) {
            double D = (*denom)[c] + kDiceSmooth;
            a[c] = -2.0 / (C * D);                              // coefficient on g_rc
            b[c] = (2.0 * (*inter)[c] + kDiceSmooth) / (C * D * D);  // on every pixel
          }
          for (std::int64_t r = 0; r < N; ++r) {
            const S* pr = probs->ptr() + r * C;
            int l = (*labels)[r];
            double dot = 0;
            for (int c = 0; c < C; ++c) {
              dpd[c] = b[c] + (c == l ? a[c] : 0.0);
              dot += dpd[c] * pr[c];
            }
            S* gr = gx.ptr() + r * C;
            for (int c = 0; c < C; ++c) {
              double ce_g = (pr[c] - (c == l ? 1.0 : 0.0)) / static_cast<double>(N);
              double dice_g = pr[c] * (dpd[c] - dot);
              gr[c] += g * static_cast<S>(ce_g + dice_g);
            }
          }
        })
      : nullptr;
  return {&t, id};
}

namespace detail {

// Shared machinery for the fused binary losses: the pointwise term is
// focal (gamma = 2) or plain BCE, the dice term is common to both.
template <class S>
Var<S> binary_sigmoid_loss(Var<S> logits, const Tensor<S>& gt, bool focal) {
  Tape<S>& t = *logits.tape;
  const Tensor<S>& xv = t.val(logits.id);
  if (xv.shape != gt.shape)
    throw std::invalid_argument("binary loss: target shape mismatch");
  const std::int64_t N = xv.size();

  auto p = std::make_shared<Tensor<S>>(xv.shape);
  auto g = std::make_shared<Tensor<S>>(gt);
  double point = 0, inter = 0, psum = 0, gsum = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    double x = xv[i], gv = gt[i];
    double sp_neg = x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
    double sp_pos = x >= 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    double pi = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    (*p)[i] = static_cast<S>(pi);
    double log_p = -sp_neg, log_q = -sp_pos;
    double q = 1.0 - pi;
    if (focal)
      point -= gv * q * q * log_p + (1.0 - gv) * pi * pi * log_q;
    else
      point -= gv * log_p + (1.0 - gv) * log_q;
    inter += pi * gv;
    psum += pi;
    gsum += gv;
  }
  point /= static_cast<double>(N);
  double D = psum + gsum + kDiceSmooth;
  double dice = 1.0 - (2.0 * inter + kDiceSmooth) / D;

  int xi = logits.id;
  int id = t.make(Tensor<S>::scalar(static_cast<S>(point + dice)), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, p, g, inter, D, N, focal](Tape<S>& tp) {
          const S go = tp.grad(id)[0];
          Tensor<S>& gx = tp.grad(xi);
          const double b = (2.0 * inter + kDiceSmooth) / (D * D);
          for (std::int64_t i = 0; i < N; ++i) {
            double pi = (*p)[i], gv = (*g)[i], q = 1.0 - pi;
            double point_g;
            if (focal) {
              double log_p = std::log(std::max(pi, 1e-300));
              double log_q = std::log(std::max(q, 1e-300));
              point_g = (gv * (q * q * q - 2.0 * pi * q * q * log_p) -
                         (1.0 - gv) * (pi * pi * pi - 2.0 * pi * pi * q * log_q)) /
                        -static_cast<double>(N);
            } else {
              point_g = (pi - gv) / static_cast<double>(N);
            }
            double dice_g = (-2.0 * gv / D + b) * pi * q;
            gx[i] += go * static_cast<S>(point_g + dice_g);
          }
        })
      : nullptr;
  return {&t, id};
}

}  // namespace detail

// BCE-with-logits + soft Dice for a binary map (H, W, 1).
template <class S>
Var<S> semantic_binary(Var<S> logits, const Tensor<S>& gt) {
  return detail::binary_sigmoid_loss(logits, gt, false);
}

// Focal(gamma=2) + soft Dice on the binary nuclei map.
template <class S>
Var<S> focal_dice_binary(Var<S> logits, const Tensor<S>& gt) {
  return detail::binary_sigmoid_loss(logits, gt, true);
}

// Foreground mask eroded by the 3x3 Sobel support: gradients there depend on
// foreground values only, so the MSGE term sees no boundary artifacts.
template <class S>
Tensor<S> eroded_fg(const Tensor<S>& fg) {
  const int H = fg.shape[0], W = fg.shape[1];
  Tensor<S> out({H, W, 1});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1 && all; ++dy)
        for (int dx = -1; dx <= 1 && all; ++dx) {
          int yy = std::min(std::max(y + dy, 0), H - 1);
          int xx = std::min(std::max(x + dx, 0), W - 1);
          all = fg[(static_cast<std::int64_t>(yy) * W + xx)] > S(0.5);
        }
      out[static_cast<std::int64_t>(y) * W + x] = all ? S(1) : S(0);
    }
  return out;
}

// MSE over all pixels plus MSGE (Sobel-gradient MSE on the eroded gt
// foreground). Empty foreground contributes zero MSGE. One fused tape node:
// the Sobel responses are evaluated with direct 9-tap loops over the (P - G)
// difference, replicate padding at the border.
template <class S>
Var<S> hv_regression(Var<S> hv_pred, const Tensor<S>& gt_hv, const Tensor<S>& gt_fg) {
  Tape<S>& t = *hv_pred.tape;
  const Tensor<S>& pv = t.val(hv_pred.id);
  if (pv.shape != gt_hv.shape) throw std::invalid_argument("loss_instance: hv shape mismatch");
  const int H = pv.shape[0], W = pv.shape[1];
  const std::int64_t N = pv.size();

  auto diff = std::make_shared<Tensor<S>>(pv.shape);
  double mse = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    double d = static_cast<double>(pv[i]) - gt_hv[i];
    (*diff)[i] = static_cast<S>(d);
    mse += d * d;
  }
  mse /= static_cast<double>(N);

  auto mask = std::make_shared<Tensor<S>>(eroded_fg<S>(gt_fg));
  double n_fg = 0;
  for (const auto& v : mask->data) n_fg += static_cast<double>(v);

  // resp[(k*2 + c)] holds S_k * diff_c on the whole grid, k in {x, y}.
  auto resp = std::make_shared<std::vector<Tensor<S>>>();
  double msge = 0;
  if (n_fg > 0) {
    for (int k = 0; k < 2; ++k) {
      const double* kernel = k == 0 ? kSobelX : kSobelY;
      for (int c = 0; c < 2; ++c) {
        Tensor<S> e({H, W});
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                int iy = std::min(std::max(y + ky - 1, 0), H - 1);
                int ix = std::min(std::max(x + kx - 1, 0), W - 1);
                acc += kernel[ky * 3 + kx] *
                       static_cast<double>((*diff)[(static_cast<std::int64_t>(iy) * W + ix) * 2 + c]);
              }
            std::int64_t o = static_cast<std::int64_t>(y) * W + x;
            e[o] = static_cast<S>(acc);
            msge += static_cast<double>((*mask)[o]) * acc * acc;
          }
        resp->push_back(std::move(e));
      }
    }
    msge /= 4.0 * n_fg;
  }

  int xi = hv_pred.id;
  int id = t.make(Tensor<S>::scalar(static_cast<S>(mse + msge)), {xi}, nullptr);
  t.nodes[id].back = t.nodes[id].needs_grad
      ? std::function<void(Tape<S>&)>([xi, id, diff, mask, resp, n_fg, H, W, N](Tape<S>& tp) {
          const S go = tp.grad(id)[0];
          Tensor<S>& gx = tp.grad(xi);
          for (std::int64_t i = 0; i < N; ++i)
            gx[i] += go * static_cast<S>(2.0 * (*diff)[i] / static_cast<double>(N));
          if (n_fg == 0) return;
          const double scale = 2.0 / (4.0 * n_fg);
          for (int k = 0; k < 2; ++k) {
            const double* kernel = k == 0 ? kSobelX : kSobelY;
            for (int c = 0; c < 2; ++c) {
              const Tensor<S>& e = (*resp)[k * 2 + c];
              for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                  std::int64_t o = static_cast<std::int64_t>(y) * W + x;
                  double coeff = go * scale * static_cast<double>((*mask)[o]) * e[o];
                  if (coeff == 0) continue;
                  for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                      int iy = std::min(std::max(y + ky - 1, 0), H - 1);
                      int ix = std::min(std::max(x + kx - 1, 0), W - 1);
                      gx[(static_cast<std::int64_t>(iy) * W + ix) * 2 + c] +=
                          static_cast<S>(coeff * kernel[ky * 3 + kx]);
                    }
                }
            }
          }
        })
      : nullptr;
  return {&t, id};
}

template <class S>
Var<S> loss_semantic(Var<S> logits, const Targets<S>& tg) {
  if (logits.value().shape[2] == 1) return semantic_binary(logits, tg.tissue_fg);
  return semantic_multiclass(logits, tg);
}

template <class S>
Var<S> loss_instance(Var<S> nuclei_binary_logits, Var<S> hv_pred, const Targets<S>& tg,
                     bool with_hv) {
  Var<S> l = focal_dice_binary(nuclei_binary_logits, tg.nuclei_fg);
  if (with_hv) l = ops::add(l, hv_regression(hv_pred, tg.hv, tg.nuclei_fg));
  return l;
}

// Eq-style composition: lambda1*prior_sem + lambda2*prior_ins + seg_sem + seg_ins.
// The prior-constraint instance term is binary-only (first forward emits no HV
// maps), so its HV regression is dropped.
template <class S>
LossReportT<S> total_loss(const CoSegOutput<S>& out, const Targets<S>& tg,
                          const LossWeights& w, bool use_prompts = true) {
  LossReportT<S> r;
  Var<S> seg_sem = loss_semantic(out.forward2.sem_logits, tg);
  Var<S> seg_ins = loss_instance(out.forward2.nuclei_binary, out.forward2.hv, tg, true);
  r.seg_sem = static_cast<double>(seg_sem.value()[0]);
  r.seg_ins = static_cast<double>(seg_ins.value()[0]);
  Var<S> total = ops::add(seg_sem, seg_ins);
  if (use_prompts) {
    Var<S> prior_sem = semantic_binary(out.forward1.tissue_binary, tg.tissue_fg);
    Var<S> prior_ins = loss_instance(out.forward1.nuclei_binary, out.forward1.hv, tg, false);
    r.prior_sem = static_cast<double>(prior_sem.value()[0]);
    r.prior_ins = static_cast<double>(prior_ins.value()[0]);
    total = ops::add(total, ops::add(ops::scale(prior_sem, static_cast<S>(w.lambda1)),
                                     ops::scale(prior_ins, static_cast<S>(w.lambda2))));
  }
  r.total = static_cast<double>(total.value()[0]);
  r.total_var = total;
  return r;
}

}  // namespace losses
}  // namespace coseg
