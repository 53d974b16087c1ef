#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"

using namespace coseg;
using coseg::testing::gradcheck_input;

namespace {

Tensor<double> randn(std::vector<int> sh, unsigned seed, double s = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(std::move(sh), rng, s);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Tensor<double> x = randn({4, 5}, 1);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t, Var<double> v) {
        Var<double> y = ops::gelu(ops::mul(v, ops::tanh_(ops::scale(v, 0.7))));
        y = ops::add(y, ops::sigmoid_(v));
        y = ops::sub(y, ops::log_sigmoid(v));
        return ops::mean_all(ops::mul(y, y));
      },
      20, 7);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("scale_by multiplies by a learnable scalar with correct adjoints") {
  Tensor<double> x = randn({3, 4}, 11);

  // Forward: out = 0.25 * x exactly.
  {
    Tape<double> t;
    Var<double> v = ops::leaf(t, x, false);
    Var<double> s = ops::constant(t, Tensor<double>::full({1}, 0.25));
    Var<double> y = ops::scale_by(v, s);
    for (std::size_t i = 0; i < x.data.size(); ++i)
      CHECK(y.value().data[i] == doctest::Approx(0.25 * x.data[i]).epsilon(0));
  }

  // Gradient wrt the tensor input.
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t, Var<double> v) {
        Var<double> s = ops::constant(t, Tensor<double>::full({1}, -0.6));
        return ops::sum_all(ops::mul(ops::scale_by(v, s), v));
      },
      12, 7);
  CHECK(res.max_rel_err < 1e-6);

  // Gradient wrt the scalar: d/ds sum(s*x ⊙ x) = sum(x⊙x).
  auto res_s = gradcheck_input(
      Tensor<double>::full({1}, 0.4),
      [&](Tape<double>& t, Var<double> sv) {
        Var<double> v = ops::leaf(t, x, false);
        return ops::sum_all(ops::mul(ops::scale_by(v, sv), v));
      },
      1, 7);
  CHECK(res_s.max_rel_err < 1e-6);
}

TEST_CASE("matmul and bias gradients") {
  Tensor<double> x = randn({3, 4}, 2);
  Tensor<double> w = randn({4, 6}, 3);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t, Var<double> v) {
        Var<double> wv = ops::leaf(t, w, false);
        Var<double> b = ops::constant(t, Tensor<double>::full({6}, 0.3));
        return ops::sum_all(ops::gelu(ops::add_bias(ops::matmul(v, wv), b)));
      },
      12, 7);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradient is correct") {
  Tensor<double> x = randn({5, 7}, 4);
  {
    Tape<double> t;
    Var<double> y = ops::softmax_rows(ops::leaf(t, x, false));
    for (int r = 0; r < 5; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += y.value()[r * 7 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  Tensor<double> probe = randn({5, 7}, 5);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t, Var<double> v) {
        return ops::sum_all(ops::mul(ops::softmax_rows(v), ops::constant(t, probe)));
      },
      20, 7);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layernorm gradient") {
  Tensor<double> x = randn({6, 8}, 6);
  Tensor<double> probe = randn({6, 8}, 7);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t, Var<double> v) {
        Var<double> gamma = ops::leaf(t, randn({8}, 8, 0.5), false);
        Var<double> beta = ops::leaf(t, randn({8}, 9, 0.5), false);
        return ops::sum_all(
            ops::mul(ops::layernorm_rows(v, gamma, beta), ops::constant(t, probe)));
      },
      30, 7);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("bmm and attention-style composition") {
  Tensor<double> x = randn({2, 3, 4}, 10);
  Tensor<double> probe = randn({2, 3, 4}, 11);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t, Var<double> v) {
        Var<double> scores = ops::scale(ops::bmm_nt(v, v), 0.5);
        Var<double> attn = ops::softmax_rows(scores);
        Var<double> out = ops::bmm_nn(attn, v);
        return ops::sum_all(ops::mul(out, ops::constant(t, probe)));
      },
      24, 7);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("conv2d forward matches direct computation and gradcheck passes") {
  // 1x5x5 input, 3x3 kernel, stride 1, zero pad
  Tensor<double> x = randn({5, 5, 1}, 12);
  Tensor<double> w = randn({9, 1}, 13);
  ops::ConvPlan plan = ops::make_conv_plan(5, 5, 1, 3, 3, 1, ops::Pad::Zero, true);
  Tape<double> t;
  Var<double> y = ops::conv2d(ops::leaf(t, x, false), ops::leaf(t, w, false), Var<double>{}, plan);
  // direct check at center pixel (2,2)
  double direct = 0;
  for (int ky = 0; ky < 3; ++ky)
    for (int kx = 0; kx < 3; ++kx) direct += x[(1 + ky) * 5 + 1 + kx] * w[ky * 3 + kx];
  CHECK(y.value()[2 * 5 + 2] == doctest::Approx(direct).epsilon(1e-12));

  Tensor<double> probe = randn({5, 5, 1}, 14);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t2, Var<double> v) {
        return ops::sum_all(ops::mul(
            ops::conv2d(v, ops::leaf(t2, w, false), Var<double>{}, plan), ops::constant(t2, probe)));
      },
      25, 7);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("conv transpose 2x2 doubles resolution and is exact on ones") {
  Tensor<double> x = Tensor<double>::full({3, 3, 2}, 1.0);
  Tensor<double> w = Tensor<double>::full({2, 4 * 2}, 0.25);  // Cin=2, Cout=2
  Tape<double> t;
  std::shared_ptr<std::vector<std::int64_t>> cache;
  Var<double> y = ops::conv_transpose_2x2(ops::leaf(t, x, false), ops::leaf(t, w, false),
                                          Var<double>{}, 2, cache);
  REQUIRE(y.shape() == std::vector<int>{6, 6, 2});
  for (auto v : y.value().data) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("bilinear resize preserves constants and backprops") {
  Tensor<double> x = Tensor<double>::full({4, 4, 1}, 2.5);
  auto plan = ops::make_bilinear_plan<double>(4, 4, 1, 9, 9);
  Tape<double> t;
  Var<double> y =
      ops::apply_linear_map(ops::leaf(t, x, false), std::shared_ptr<const ops::LinearMap<double>>(plan));
  for (auto v : y.value().data) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));

  Tensor<double> xr = randn({4, 4, 1}, 20);
  Tensor<double> probe = randn({9, 9, 1}, 21);
  auto res = gradcheck_input(
      xr,
      [&](Tape<double>& t2, Var<double> v) {
        return ops::sum_all(ops::mul(
            ops::apply_linear_map(v, std::shared_ptr<const ops::LinearMap<double>>(plan)),
            ops::constant(t2, probe)));
      },
      16, 7);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("ce_rows equals manual cross-entropy") {
  Tensor<double> logits = randn({3, 4}, 30);
  auto labels = std::make_shared<std::vector<int>>(std::vector<int>{1, 3, 0});
  Tape<double> t;
  Var<double> loss = ops::ce_rows(ops::leaf(t, logits, false), labels);
  double manual = 0;
  for (int r = 0; r < 3; ++r) {
    double z = 0, m = -1e30;
    for (int c = 0; c < 4; ++c) m = std::max(m, logits[r * 4 + c]);
    for (int c = 0; c < 4; ++c) z += std::exp(logits[r * 4 + c] - m);
    manual += std::log(z) + m - logits[r * 4 + (*labels)[r]];
  }
  manual /= 3;
  CHECK(loss.value()[0] == doctest::Approx(manual).epsilon(1e-12));

  auto res = gradcheck_input(
      logits,
      [&](Tape<double>& t2, Var<double> v) { return ops::ce_rows(v, labels); }, 12, 7);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("logsumexp_cols gradient and stop_grad blocks flow") {
  Tensor<double> x = randn({4, 5}, 40);
  auto res = gradcheck_input(
      x,
      [&](Tape<double>& t2, Var<double> v) {
        return ops::sum_all(ops::logsumexp_cols(v, 1, 4));
      },
      20, 7);
  CHECK(res.max_rel_err < 1e-6);

  Tape<double> t;
  Var<double> v = ops::leaf(t, x, true);
  Var<double> loss = ops::sum_all(ops::stop_grad(ops::mul(v, v)));
  t.backward(loss.id);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(t.grad(v.id)[i] == 0.0);
}
