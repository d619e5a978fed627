#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fblnet/autodiff.hpp"
#include "fblnet/rng.hpp"
#include "test_util.hpp"

using namespace fblnet;
using namespace fblnet::testutil;

namespace {
constexpr double kTol = 5e-6;

// keeps relu/abs kinks away from the sample points
Tensor<double> randn_off_zero(const Shape& s, Rng& rng) {
  Tensor<double> t = Tensor<double>::randn(s, rng);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (std::abs(t[i]) < 0.05) t[i] = t[i] < 0 ? t[i] - 0.1 : t[i] + 0.1;
  return t;
}
}  // namespace

TEST_CASE("elementwise op gradients") {
  Rng rng(1);
  Shape s{2, 3, 4};
  Tensor<double> probe = randn_d(s, rng);
  Tensor<double> other = randn_off_zero(s, rng);
  Tensor<double> x0 = randn_off_zero(s, rng);

  auto with_other = [&](auto op) {
    return [&, op](const Var<double>& x) { return probed(op(x, make_var<double>(other)), probe); };
  };
  CHECK(max_rel_grad_err(x0, with_other([](auto a, auto b) { return add(a, b); })) < kTol);
  CHECK(max_rel_grad_err(x0, with_other([](auto a, auto b) { return sub(a, b); })) < kTol);
  CHECK(max_rel_grad_err(x0, with_other([](auto a, auto b) { return mul(a, b); })) < kTol);
  CHECK(max_rel_grad_err(x0, with_other([](auto a, auto b) { return div(a, b); })) < kTol);

  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) { return probed(add_scalar(x, 0.7), probe); }) < kTol);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) { return probed(mul_scalar(x, -1.4), probe); }) < kTol);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) { return probed(relu(x), probe); }) < kTol);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) { return probed(sigmoid(x), probe); }) < kTol);

  Tensor<double> pos(s, 0.0);
  for (std::int64_t i = 0; i < pos.numel(); ++i) pos[i] = 0.5 + std::abs(x0[i]);
  CHECK(max_rel_grad_err(pos, [&](const Var<double>& x) { return probed(log_op(x), probe); }) < kTol);
  CHECK(max_rel_grad_err(pos, [&](const Var<double>& x) { return probed(sqrt_op(x), probe); }) < kTol);
}

TEST_CASE("second argument gradients flow too") {
  Rng rng(2);
  Shape s{3, 5};
  Tensor<double> probe = randn_d(s, rng);
  Tensor<double> a = randn_off_zero(s, rng);
  Tensor<double> b0 = randn_off_zero(s, rng);
  CHECK(max_rel_grad_err(b0, [&](const Var<double>& b) {
          return probed(div(make_var<double>(a), b), probe);
        }) < kTol);
  CHECK(max_rel_grad_err(b0, [&](const Var<double>& b) {
          return probed(mul(make_var<double>(a), b), probe);
        }) < kTol);
}

TEST_CASE("shared subexpression accumulates gradient") {
  Rng rng(3);
  Tensor<double> x0 = randn_off_zero(Shape{6}, rng);
  Tensor<double> probe = randn_d(Shape{6}, rng);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          Var<double> y = mul(x, x);           // x twice
          Var<double> z = add(y, mul_scalar(x, 0.5));  // and a third time
          return probed(z, probe);
        }) < kTol);
}

TEST_CASE("reductions and broadcast-scalar gradients") {
  Rng rng(4);
  Shape s{4, 5};
  Tensor<double> x0 = randn_off_zero(s, rng);
  Tensor<double> probe = randn_d(s, rng);
  CHECK(max_rel_grad_err(x0, [](const Var<double>& x) { return sum_all(x); }) < kTol);
  CHECK(max_rel_grad_err(x0, [](const Var<double>& x) { return mean_all(x); }) < kTol);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          return probed(sub_bscalar(x, mean_all(x)), probe);
        }) < kTol);
  // z-score: everything at once, gradients through mean and stddev
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          Var<double> c = sub_bscalar(x, mean_all(x));
          Var<double> sd = sqrt_op(mean_all(mul(c, c)));
          return probed(div_bscalar(c, sd), probe);
        }) < kTol);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          return probed(mul_bscalar(x, sum_all(x)), probe);
        }) < kTol);
}

TEST_CASE("structure op gradients") {
  Rng rng(5);
  Tensor<double> x0 = randn_d(Shape{2, 4, 3, 3}, rng);
  Tensor<double> probe_tok = randn_d(Shape{2, 9, 4}, rng);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          return probed(nchw_to_tokens(x), probe_tok);
        }) < kTol);

  Tensor<double> tok0 = randn_d(Shape{2, 16, 3}, rng);
  Tensor<double> probe_img = randn_d(Shape{2, 3, 4, 4}, rng);
  CHECK(max_rel_grad_err(tok0, [&](const Var<double>& x) {
          return probed(tokens_to_nchw(x, 4, 4), probe_img);
        }) < kTol);

  Tensor<double> probe_win = randn_d(Shape{8, 4, 3}, rng);
  CHECK(max_rel_grad_err(tok0, [&](const Var<double>& x) {
          return probed(window_partition(x, 4, 2), probe_win);
        }) < kTol);
  Tensor<double> probe_back = randn_d(Shape{2, 16, 3}, rng);
  CHECK(max_rel_grad_err(tok0, [&](const Var<double>& x) {
          return probed(window_merge(window_partition(x, 4, 2), 4, 2, 2), probe_back);
        }) < kTol);

  Tensor<double> probe_merge = randn_d(Shape{2, 4, 12}, rng);
  CHECK(max_rel_grad_err(tok0, [&](const Var<double>& x) {
          return probed(token_merge_2x2(x, 4), probe_merge);
        }) < kTol);

  Tensor<double> a0 = randn_d(Shape{2, 3, 4, 4}, rng);
  Tensor<double> b0 = randn_d(Shape{2, 2, 4, 4}, rng);
  Tensor<double> probe_cat = randn_d(Shape{2, 5, 4, 4}, rng);
  CHECK(max_rel_grad_err(a0, [&](const Var<double>& x) {
          return probed(concat_channels(x, make_var<double>(b0)), probe_cat);
        }) < kTol);
  CHECK(max_rel_grad_err(b0, [&](const Var<double>& x) {
          return probed(concat_channels(make_var<double>(a0), x), probe_cat);
        }) < kTol);

  Tensor<double> flat0 = randn_d(Shape{12}, rng);
  Tensor<double> probe_g = randn_d(Shape{5}, rng);
  std::vector<std::int64_t> idx{0, 3, 3, 11, 7};  // duplicate index on purpose
  CHECK(max_rel_grad_err(flat0, [&](const Var<double>& x) {
          return probed(gather_pixels(x, idx), probe_g);
        }) < kTol);

  Tensor<double> batched = randn_d(Shape{3, 2, 4}, rng);
  Tensor<double> probe_sel = randn_d(Shape{2, 4}, rng);
  CHECK(max_rel_grad_err(batched, [&](const Var<double>& x) {
          return probed(select_batch(x, 1), probe_sel);
        }) < kTol);

  Tensor<double> probe_rs = randn_d(Shape{3, 4}, rng);
  CHECK(max_rel_grad_err(flat0, [&](const Var<double>& x) {
          return probed(reshape(x, Shape{3, 4}), probe_rs);
        }) < kTol);
}

TEST_CASE("linear / bmm / softmax gradients") {
  Rng rng(6);
  Tensor<double> x0 = randn_d(Shape{3, 4}, rng);
  Tensor<double> w0 = randn_d(Shape{5, 4}, rng);
  Tensor<double> b0 = randn_d(Shape{5}, rng);
  Tensor<double> probe = randn_d(Shape{3, 5}, rng);
  auto lin_x = [&](const Var<double>& x) {
    return probed(linear(x, make_var<double>(w0), make_var<double>(b0)), probe);
  };
  auto lin_w = [&](const Var<double>& w) {
    return probed(linear(make_var<double>(x0), w, make_var<double>(b0)), probe);
  };
  auto lin_b = [&](const Var<double>& b) {
    return probed(linear(make_var<double>(x0), make_var<double>(w0), b), probe);
  };
  CHECK(max_rel_grad_err(x0, lin_x) < kTol);
  CHECK(max_rel_grad_err(w0, lin_w) < kTol);
  CHECK(max_rel_grad_err(b0, lin_b) < kTol);

  Tensor<double> A0 = randn_d(Shape{2, 3, 4}, rng);
  Tensor<double> B0 = randn_d(Shape{2, 4, 5}, rng);
  Tensor<double> Bt0 = randn_d(Shape{2, 5, 4}, rng);
  Tensor<double> probe_mm = randn_d(Shape{2, 3, 5}, rng);
  CHECK(max_rel_grad_err(A0, [&](const Var<double>& a) {
          return probed(bmm(a, make_var<double>(B0)), probe_mm);
        }) < kTol);
  CHECK(max_rel_grad_err(B0, [&](const Var<double>& b) {
          return probed(bmm(make_var<double>(A0), b), probe_mm);
        }) < kTol);
  CHECK(max_rel_grad_err(A0, [&](const Var<double>& a) {
          return probed(bmm(a, make_var<double>(Bt0), true), probe_mm);
        }) < kTol);
  CHECK(max_rel_grad_err(Bt0, [&](const Var<double>& b) {
          return probed(bmm(make_var<double>(A0), b, true), probe_mm);
        }) < kTol);

  Tensor<double> s0 = randn_d(Shape{4, 6}, rng);
  Tensor<double> probe_sm = randn_d(Shape{4, 6}, rng);
  CHECK(max_rel_grad_err(s0, [&](const Var<double>& x) {
          return probed(softmax_lastdim(x), probe_sm);
        }) < kTol);
}

TEST_CASE("conv2d gradients across kernel/stride/padding") {
  Rng rng(7);
  struct Cfg {
    int ci, co, k, stride, pad, hw;
  } cfgs[] = {{2, 3, 3, 1, 1, 5}, {3, 2, 3, 2, 1, 6}, {2, 4, 1, 1, 0, 4}, {1, 2, 7, 2, 3, 8}};
  for (auto [ci, co, k, stride, pad, hw] : cfgs) {
    CAPTURE(k);
    CAPTURE(stride);
    Tensor<double> x0 = randn_d(Shape{2, ci, hw, hw}, rng);
    Tensor<double> w0 = randn_d(Shape{co, ci, k, k}, rng, 0.5);
    Tensor<double> b0 = randn_d(Shape{co}, rng);
    int ho = (hw + 2 * pad - k) / stride + 1;
    Tensor<double> probe = randn_d(Shape{2, co, ho, ho}, rng);
    CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
            return probed(conv2d(x, make_var<double>(w0), make_var<double>(b0), stride, pad), probe);
          }) < kTol);
    CHECK(max_rel_grad_err(w0, [&](const Var<double>& w) {
            return probed(conv2d(make_var<double>(x0), w, make_var<double>(b0), stride, pad), probe);
          }) < kTol);
    CHECK(max_rel_grad_err(b0, [&](const Var<double>& b) {
            return probed(conv2d(make_var<double>(x0), make_var<double>(w0), b, stride, pad), probe);
          }) < kTol);
  }
}

TEST_CASE("batchnorm2d gradients, train and eval") {
  Rng rng(8);
  Shape s{3, 2, 4, 4};
  Tensor<double> x0 = randn_d(s, rng);
  Tensor<double> g0 = randn_off_zero(Shape{2}, rng);
  Tensor<double> be0 = randn_d(Shape{2}, rng);
  Tensor<double> probe = randn_d(s, rng);
  for (bool training : {true, false}) {
    CAPTURE(training);
    // fresh running stats every call so the builder is a fixed function
    auto bn = [&](const Var<double>& x, const Var<double>& g, const Var<double>& b) {
      Tensor<double> rm(Shape{2}, 0.3);
      Tensor<double> rv(Shape{2}, 1.7);
      return batchnorm2d(x, g, b, &rm, &rv, training);
    };
    CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
            return probed(bn(x, make_var<double>(g0), make_var<double>(be0)), probe);
          }) < kTol);
    CHECK(max_rel_grad_err(g0, [&](const Var<double>& g) {
            return probed(bn(make_var<double>(x0), g, make_var<double>(be0)), probe);
          }) < kTol);
    CHECK(max_rel_grad_err(be0, [&](const Var<double>& b) {
            return probed(bn(make_var<double>(x0), make_var<double>(g0), b), probe);
          }) < kTol);
  }
}

TEST_CASE("batchnorm2d updates running stats only in training mode") {
  Rng rng(9);
  Tensor<double> x0 = randn_d(Shape{4, 2, 3, 3}, rng);
  Tensor<double> g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  Tensor<double> rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
  batchnorm2d(make_var<double>(x0), make_var<double>(g), make_var<double>(b), &rm, &rv, true);
  CHECK(rm[0] != 0.0);
  Tensor<double> rm2 = rm, rv2 = rv;
  batchnorm2d(make_var<double>(x0), make_var<double>(g), make_var<double>(b), &rm, &rv, false);
  CHECK(rm[0] == rm2[0]);
  CHECK(rv[1] == rv2[1]);
}

TEST_CASE("layernorm gradients") {
  Rng rng(10);
  Tensor<double> x0 = randn_d(Shape{3, 5, 6}, rng);
  Tensor<double> g0 = randn_off_zero(Shape{6}, rng);
  Tensor<double> b0 = randn_d(Shape{6}, rng);
  Tensor<double> probe = randn_d(Shape{3, 5, 6}, rng);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          return probed(layernorm(x, make_var<double>(g0), make_var<double>(b0)), probe);
        }) < kTol);
  CHECK(max_rel_grad_err(g0, [&](const Var<double>& g) {
          return probed(layernorm(make_var<double>(x0), g, make_var<double>(b0)), probe);
        }) < kTol);
  CHECK(max_rel_grad_err(b0, [&](const Var<double>& b) {
          return probed(layernorm(make_var<double>(x0), make_var<double>(g0), b), probe);
        }) < kTol);
}

TEST_CASE("bilinear resize gradients, up and down") {
  Rng rng(11);
  Tensor<double> x0 = randn_d(Shape{2, 3, 4, 4}, rng);
  Tensor<double> probe_up = randn_d(Shape{2, 3, 8, 8}, rng);
  CHECK(max_rel_grad_err(x0, [&](const Var<double>& x) {
          return probed(upsample_bilinear(x, 8, 8), probe_up);
        }) < kTol);
  Tensor<double> x1 = randn_d(Shape{1, 2, 8, 8}, rng);
  Tensor<double> probe_dn = randn_d(Shape{1, 2, 4, 4}, rng);
  CHECK(max_rel_grad_err(x1, [&](const Var<double>& x) {
          return probed(upsample_bilinear(x, 4, 4), probe_dn);
        }) < kTol);
}

TEST_CASE("bilinear resize preserves constants exactly on integer factors") {
  Tensor<double> ones(Shape{1, 2, 8, 8}, 1.0);
  Var<double> y = upsample_bilinear(make_var<double>(ones), 2, 2);
  for (std::int64_t i = 0; i < y->value.numel(); ++i) CHECK(y->value[i] == 1.0);
  Var<double> z = upsample_bilinear(make_var<double>(ones), 16, 16);
  for (std::int64_t i = 0; i < z->value.numel(); ++i) CHECK(z->value[i] == 1.0);
}

TEST_CASE("guide_mul gradients for tokens and attention") {
  Rng rng(12);
  Tensor<double> tok0 = randn_d(Shape{2, 6, 3}, rng);
  Tensor<double> ka0 = randn_d(Shape{3, 6}, rng);
  Tensor<double> probe = randn_d(Shape{2, 6, 3}, rng);
  CHECK(max_rel_grad_err(tok0, [&](const Var<double>& t) {
          return probed(guide_mul(t, make_var<double>(ka0), 6.0), probe);
        }) < kTol);
  CHECK(max_rel_grad_err(ka0, [&](const Var<double>& k) {
          return probed(guide_mul(make_var<double>(tok0), k, 6.0), probe);
        }) < kTol);
}

TEST_CASE("no-grad guard prunes the graph") {
  Tensor<double> x0(Shape{3}, 2.0);
  Var<double> x = make_var<double>(x0, true);
  {
    NoGradGuard ng;
    Var<double> y = mul(x, x);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
  }
  Var<double> z = mul(x, x);
  CHECK(z->requires_grad);
}
