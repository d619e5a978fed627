#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fblnet/fbl.hpp"
#include "fblnet/loss.hpp"
#include "fblnet/model.hpp"
#include "test_util.hpp"

using namespace fblnet;

namespace {

ModelConfig desk_cfg(int side, int width, std::uint64_t seed = 11) {
  ModelConfig c;
  c.input_side = side;
  c.base_width = width;
  c.seed = seed;
  return c;
}

template <typename T>
Tensor<T> seeded_images(int batch, int side, Rng rng, T lo = T(0), T hi = T(1)) {
  Tensor<T> img(Shape{batch, 3, side, side});
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<T>(rng.uniform(lo, hi));
  return img;
}

Shape with_batch(int b, const StageShape& st) { return Shape{b, st.c, st.h, st.w}; }

// Forward one batch and check every intermediate against the plan.
void check_forward_shapes(const ModelConfig& cfg, int batch) {
  FblNet<float> net(cfg);
  const ShapePlan& plan = net.plan;
  Tensor<float> img = seeded_images<float>(batch, cfg.input_side, Rng::derive(cfg.seed, 99));
  auto r = net.forward(img);

  for (int i = 0; i < 5; ++i)
    CHECK(r.C[static_cast<std::size_t>(i)]->value.shape() == with_batch(batch, plan.C[static_cast<std::size_t>(i)]));
  for (int i = 0; i < 4; ++i)
    CHECK(r.Tt[static_cast<std::size_t>(i)]->value.shape() == with_batch(batch, plan.T[static_cast<std::size_t>(i)]));
  CHECK(r.K_fusion->value.shape() ==
        Shape{1, plan.K_fusion_shape.c, plan.K_fusion_shape.h, plan.K_fusion_shape.w});
  CHECK(r.K_a->value.shape() == Shape{plan.attn_dim, plan.n_tokens});
  CHECK(r.W->value.shape() == Shape{batch, plan.n_tokens, plan.n_tokens});
  CHECK(r.F->value.shape() == with_batch(batch, plan.K_fusion_shape));
  for (int i = 0; i < 5; ++i)
    CHECK(r.d[static_cast<std::size_t>(i)]->value.shape() == with_batch(batch, plan.d[static_cast<std::size_t>(i)]));
  CHECK(r.A->value.shape() == Shape{batch, 1, cfg.input_side, cfg.input_side});
  CHECK(net.store.buffers.at("knowledge.K").shape() ==
        Shape{plan.K_shape.c, plan.K_shape.h, plan.K_shape.w});

  for (std::int64_t i = 0; i < r.A->value.numel(); ++i) {
    CHECK(r.A->value[i] > 0.0f);
    CHECK(r.A->value[i] < 1.0f);
  }
  CHECK(r.F->value.all_finite());
}

}  // namespace

TEST_CASE("forward shape contract at the desk scales") {
  check_forward_shapes(desk_cfg(64, 16), 2);
  check_forward_shapes(desk_cfg(32, 8), 3);
}

TEST_CASE("forward shape contract at full scale") {
  check_forward_shapes(desk_cfg(224, 64), 1);
}

TEST_CASE("zero image stays finite") {
  FblNet<float> net(desk_cfg(64, 16));
  Tensor<float> img(Shape{2, 3, 64, 64}, 0.0f);
  auto r = net.forward(img);
  for (int i = 0; i < 5; ++i) CHECK(r.C[static_cast<std::size_t>(i)]->value.all_finite());
  for (int i = 0; i < 4; ++i) CHECK(r.Tt[static_cast<std::size_t>(i)]->value.all_finite());
  CHECK(r.F->value.all_finite());
  CHECK(r.A->value.all_finite());
  for (std::int64_t i = 0; i < r.A->value.numel(); ++i) {
    CHECK(r.A->value[i] > 0.0f);
    CHECK(r.A->value[i] < 1.0f);
  }
}

TEST_CASE("disabled encoder pathways are zeroed but the network still runs") {
  Tensor<float> img = seeded_images<float>(2, 64, Rng(5));

  ModelConfig cnn_only = desk_cfg(64, 16);
  cnn_only.encoder_mode = EncoderMode::cnn;
  FblNet<float> a(cnn_only);
  auto ra = a.forward(img);
  for (int i = 0; i < 4; ++i) {
    const Tensor<float>& t = ra.Tt[static_cast<std::size_t>(i)]->value;
    for (std::int64_t j = 0; j < t.numel(); ++j) REQUIRE(t[j] == 0.0f);
  }
  CHECK(ra.A->value.all_finite());

  ModelConfig trans_only = desk_cfg(64, 16);
  trans_only.encoder_mode = EncoderMode::trans;
  FblNet<float> b(trans_only);
  auto rb = b.forward(img);
  for (int i = 0; i < 5; ++i) {
    const Tensor<float>& c = rb.C[static_cast<std::size_t>(i)]->value;
    for (std::int64_t j = 0; j < c.numel(); ++j) REQUIRE(c[j] == 0.0f);
  }
  CHECK(rb.A->value.all_finite());
  CHECK(rb.A->value.shape() == Shape{2, 1, 64, 64});
}

TEST_CASE("batch independence in eval mode") {
  FblNet<float> net(desk_cfg(64, 16));
  net.set_train(false);
  NoGradGuard ng;
  Tensor<float> img = seeded_images<float>(3, 64, Rng(21));
  auto full = net.forward(img);
  for (int n = 0; n < 3; ++n) {
    Tensor<float> one(Shape{1, 3, 64, 64});
    std::copy(img.data() + n * one.numel(), img.data() + (n + 1) * one.numel(), one.data());
    auto single = net.forward(one);
    double worst = 0;
    const std::int64_t plane = 64 * 64;
    for (std::int64_t i = 0; i < plane; ++i)
      worst = std::max(worst, std::abs(static_cast<double>(full.A->value[n * plane + i]) -
                                       static_cast<double>(single.A->value[i])));
    CHECK(worst < 1e-5);
  }
}

// ---------------------------------------------------------------------------
// knowledge buffer
// ---------------------------------------------------------------------------

TEST_CASE("knowledge buffer starts as ones with iteration zero") {
  FblNet<float> net(desk_cfg(32, 8));
  const Tensor<float>& k = net.store.buffers.at("knowledge.K");
  CHECK(k.shape() == Shape{8, 8, 8});
  for (std::int64_t i = 0; i < k.numel(); ++i) REQUIRE(k[i] == 1.0f);
  CHECK(net.iteration() == 0);
}

TEST_CASE("select_feedback returns a detached copy") {
  FblNet<float> net(desk_cfg(32, 8));
  Tensor<float> img = seeded_images<float>(2, 32, Rng(3));
  auto r = net.forward(img);
  for (int node = 0; node < 5; ++node) {
    Tensor<float> b = select_feedback(r.d, static_cast<FeedbackNode>(node));
    CHECK(b.shape() == r.d[static_cast<std::size_t>(node)]->value.shape());
  }
  Tensor<float> b = select_feedback(r.d, FeedbackNode::d2);
  float before = r.d[2]->value[0];
  b[0] += 100.0f;
  CHECK(r.d[2]->value[0] == before);
}

TEST_CASE("knowledge update matches a scripted oracle") {
  ModelConfig cfg = desk_cfg(32, 8, 77);
  FblNet<float> net(cfg);
  const int ck = net.plan.K_shape.c, kh = net.plan.K_shape.h, kw = net.plan.K_shape.w;
  const int bn = 3;
  REQUIRE(ck == 8);

  // Seed every buffer the update rule reads so the oracle exercises the full
  // affine path, not just the defaults.
  Rng rng(2024);
  auto& store = net.store;
  Tensor<float>& K = store.buffers.at("knowledge.K");
  Tensor<float>& cw = store.buffers.at("knowledge.update.conv.w");
  Tensor<float>& cb = store.buffers.at("knowledge.update.conv.b");
  Tensor<float>& gamma = store.buffers.at("knowledge.update.bn.gamma");
  Tensor<float>& beta = store.buffers.at("knowledge.update.bn.beta");
  Tensor<float>& rm = store.buffers.at("knowledge.update.bn.run_mean");
  Tensor<float>& rv = store.buffers.at("knowledge.update.bn.run_var");
  for (std::int64_t i = 0; i < K.numel(); ++i) K[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < cw.numel(); ++i) cw[i] = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (std::int64_t i = 0; i < cb.numel(); ++i) cb[i] = static_cast<float>(rng.uniform(-0.1, 0.1));
  for (std::int64_t i = 0; i < gamma.numel(); ++i) gamma[i] = static_cast<float>(rng.uniform(0.5, 1.5));
  for (std::int64_t i = 0; i < beta.numel(); ++i) beta[i] = static_cast<float>(rng.uniform(-0.3, 0.3));
  for (std::int64_t i = 0; i < rm.numel(); ++i) rm[i] = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (std::int64_t i = 0; i < rv.numel(); ++i) rv[i] = static_cast<float>(rng.uniform(0.5, 1.5));

  Tensor<float> b_batch(Shape{bn, ck, kh, kw});
  for (std::int64_t i = 0; i < b_batch.numel(); ++i)
    b_batch[i] = static_cast<float>(rng.uniform(-1.0, 1.0));

  // Freeze pre-update state for the oracle.
  Tensor<float> k0 = K, rm0 = rm, rv0 = rv;

  // --- straight-line double-precision oracle -------------------------------
  const std::int64_t plane = static_cast<std::int64_t>(kh) * kw;
  // conv(concat(K, B_n)), 3x3 stride 1 pad 1
  std::vector<double> conv(static_cast<std::size_t>(bn) * ck * plane, 0.0);
  for (int n = 0; n < bn; ++n)
    for (int co = 0; co < ck; ++co)
      for (int oy = 0; oy < kh; ++oy)
        for (int ox = 0; ox < kw; ++ox) {
          double acc = cb[co];
          for (int ci = 0; ci < 2 * ck; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                int iy = oy - 1 + ky, ix = ox - 1 + kx;
                if (iy < 0 || iy >= kh || ix < 0 || ix >= kw) continue;
                double x = ci < ck ? k0.at(ci, iy, ix) : b_batch.at(n, ci - ck, iy, ix);
                acc += static_cast<double>(cw[((co * 2 * ck + ci) * 3 + ky) * 3 + kx]) * x;
              }
          conv[static_cast<std::size_t>(((n * ck + co) * kh + oy) * kw + ox)] = acc;
        }
  // BN with pre-update running stats, ReLU, +K, batch mean; then the expected
  // post-update running stats from the batch moments.
  std::vector<double> want_k(static_cast<std::size_t>(ck) * plane, 0.0);
  std::vector<double> want_rm(static_cast<std::size_t>(ck)), want_rv(static_cast<std::size_t>(ck));
  const double eps = 1e-5, momentum = 0.1;
  const double m = static_cast<double>(bn) * static_cast<double>(plane);
  for (int c = 0; c < ck; ++c) {
    double g = gamma[c] / std::sqrt(static_cast<double>(rv0[c]) + eps);
    double sum = 0, sq = 0;
    for (int n = 0; n < bn; ++n)
      for (std::int64_t i = 0; i < plane; ++i) {
        double x = conv[static_cast<std::size_t>((n * ck + c) * plane + i)];
        sum += x;
        sq += x * x;
        double y = (x - rm0[c]) * g + beta[c];
        want_k[static_cast<std::size_t>(c * plane + i)] += std::max(0.0, y) + k0[c * plane + i];
      }
    for (std::int64_t i = 0; i < plane; ++i) want_k[static_cast<std::size_t>(c * plane + i)] /= bn;
    double mu = sum / m;
    double var = std::max(0.0, sq / m - mu * mu);
    double unbiased = var * m / (m - 1.0);
    want_rm[static_cast<std::size_t>(c)] = (1.0 - momentum) * rm0[c] + momentum * mu;
    want_rv[static_cast<std::size_t>(c)] = (1.0 - momentum) * rv0[c] + momentum * unbiased;
  }

  net.knowledge.update(b_batch);

  CHECK(K.rank() == k0.rank());  // no batch dimension on the stored buffer
  CHECK(net.iteration() == 1);
  double worst = 0, worst_stat = 0;
  for (std::int64_t i = 0; i < K.numel(); ++i)
    worst = std::max(worst, std::abs(K[i] - want_k[static_cast<std::size_t>(i)]));
  for (int c = 0; c < ck; ++c) {
    worst_stat = std::max(worst_stat, std::abs(rm[c] - want_rm[static_cast<std::size_t>(c)]));
    worst_stat = std::max(worst_stat, std::abs(rv[c] - want_rv[static_cast<std::size_t>(c)]));
  }
  CHECK(worst < 1e-6);
  CHECK(worst_stat < 1e-6);

  // A second update with the same feedback differs: the running stats moved.
  Tensor<float> k1 = K;
  net.knowledge.update(b_batch);
  CHECK(net.iteration() == 2);
  CHECK(max_abs_diff(K, k1) > 1e-8);
}

TEST_CASE("zero update conv leaves the fresh knowledge buffer fixed") {
  FblNet<float> net(desk_cfg(32, 8, 5));
  auto& store = net.store;
  store.buffers.at("knowledge.update.conv.w").fill(0.0f);
  store.buffers.at("knowledge.update.conv.b").fill(0.0f);
  Rng rng(9);
  Tensor<float> b_batch(Shape{3, 8, 8, 8});
  for (std::int64_t i = 0; i < b_batch.numel(); ++i)
    b_batch[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  net.knowledge.update(b_batch);
  const Tensor<float>& K = store.buffers.at("knowledge.K");
  for (std::int64_t i = 0; i < K.numel(); ++i) REQUIRE(K[i] == 1.0f);
  CHECK(net.iteration() == 1);
}

TEST_CASE("knowledge update rejects mismatched feedback shapes") {
  FblNet<float> net(desk_cfg(32, 8));
  Tensor<float> wrong(Shape{2, 8, 4, 4}, 0.1f);
  CHECK_THROWS_AS(net.knowledge.update(wrong), FblError);
  Tensor<float> rank3(Shape{8, 8, 8}, 0.1f);
  CHECK_THROWS_AS(net.knowledge.update(rank3), FblError);
}

TEST_CASE("fusion view projects a constant buffer to per-channel constants") {
  FblNet<float> net(desk_cfg(64, 16, 3));
  auto& store = net.store;
  Tensor<float>& K = store.buffers.at("knowledge.K");
  const int ck = net.plan.K_shape.c;
  const std::int64_t plane = static_cast<std::int64_t>(net.plan.K_shape.h) * net.plan.K_shape.w;
  Rng rng(40);
  std::vector<float> levels(static_cast<std::size_t>(ck));
  for (int c = 0; c < ck; ++c) {
    levels[static_cast<std::size_t>(c)] = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (std::int64_t i = 0; i < plane; ++i) K[c * plane + i] = levels[static_cast<std::size_t>(c)];
  }
  Var<float> view = net.knowledge.fusion_view();
  const StageShape& fs = net.plan.K_fusion_shape;
  REQUIRE(view->value.shape() == Shape{1, fs.c, fs.h, fs.w});
  const Tensor<float>& pw = store.params.at("knowledge.resize.w")->value;
  const Tensor<float>& pb = store.params.at("knowledge.resize.b")->value;
  const std::int64_t fplane = static_cast<std::int64_t>(fs.h) * fs.w;
  for (int co = 0; co < fs.c; ++co) {
    double want = pb[co];
    for (int ci = 0; ci < ck; ++ci)
      want += static_cast<double>(pw[co * ck + ci]) * levels[static_cast<std::size_t>(ci)];
    for (std::int64_t i = 0; i < fplane; ++i)
      CHECK(std::abs(view->value[co * fplane + i] - want) < 1e-6);
  }
}

// ---------------------------------------------------------------------------
// fusion
// ---------------------------------------------------------------------------

TEST_CASE("knowledge attention softmax behaviour") {
  FblNet<float> net(desk_cfg(64, 16));
  const int dim = net.plan.attn_dim, ntok = net.plan.n_tokens;
  const StageShape& fs = net.plan.K_fusion_shape;

  // constant logits -> exactly uniform rows
  Var<float> flat = make_var<float>(Tensor<float>(Shape{1, fs.c, fs.h, fs.w}, 0.37f));
  Var<float> ka = net.fusion.knowledge_attention(flat);
  REQUIRE(ka->value.shape() == Shape{dim, ntok});
  for (std::int64_t i = 0; i < ka->value.numel(); ++i)
    CHECK(std::abs(ka->value[i] - 1.0f / static_cast<float>(ntok)) < 1e-7);

  // a +20 spike saturates its token
  Tensor<float> spike(Shape{1, fs.c, fs.h, fs.w}, 0.0f);
  spike[5] = 20.0f;  // channel 0, token 5
  Var<float> ka2 = net.fusion.knowledge_attention(make_var<float>(spike));
  CHECK(ka2->value.at(0, 5) > 0.999f);

  // seeded logits match an exp/sum oracle
  Rng rng(808);
  Tensor<float> logits(Shape{1, fs.c, fs.h, fs.w});
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    logits[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
  Var<float> ka3 = net.fusion.knowledge_attention(make_var<float>(logits));
  double worst = 0;
  for (int c = 0; c < dim; ++c) {
    double z = 0;
    for (int t = 0; t < ntok; ++t) z += std::exp(static_cast<double>(logits[c * ntok + t]));
    for (int t = 0; t < ntok; ++t) {
      double want = std::exp(static_cast<double>(logits[c * ntok + t])) / z;
      worst = std::max(worst, std::abs(static_cast<double>(ka3->value.at(c, t)) - want));
    }
  }
  CHECK(worst < 1e-7);

  // every channel sums to one
  for (int c = 0; c < dim; ++c) {
    double s = 0;
    for (int t = 0; t < ntok; ++t) s += ka3->value.at(c, t);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("uniform attention gating is an exact identity") {
  FblNet<float> net(desk_cfg(64, 16, 6));
  Tensor<float> feat(Shape{2, 2 * net.plan.attn_dim, 4, 4});
  Rng rng(13);
  for (std::int64_t i = 0; i < feat.numel(); ++i)
    feat[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  Var<float> fv = make_var<float>(feat);
  Var<float> guided =
      net.fusion.guide(fv, net.fusion.squeeze_c, net.fusion.ln_c, net.fusion.uniform_attention());
  Var<float> plain = net.fusion.ln_c(
      nchw_to_tokens(upsample_bilinear(net.fusion.squeeze_c(fv), net.fusion.grid, net.fusion.grid)));
  CHECK(max_abs_diff(guided->value, plain->value) == 0.0);
}

TEST_CASE("guided tokens match a scripted squeeze-upsample-norm-gate oracle") {
  // Double instantiation so the comparison probes the composition, not the
  // accumulated single-precision drift of a 128-term dot product.
  FblNet<double> net(desk_cfg(64, 16, 9));
  const int dim = net.plan.attn_dim;  // 64
  const int grid = net.plan.K_fusion_shape.h, ntok = net.plan.n_tokens;
  const int in_ch = 2 * dim, in_side = 2;  // C5 is (B, 8w, S/32, S/32)
  const int B = 2;

  Rng rng(313);
  Tensor<double> feat(Shape{B, in_ch, in_side, in_side});
  for (std::int64_t i = 0; i < feat.numel(); ++i) feat[i] = rng.uniform(-0.25, 0.25);
  Tensor<double> ka_t(Shape{dim, ntok});
  for (std::int64_t i = 0; i < ka_t.numel(); ++i) ka_t[i] = rng.uniform(0.0, 0.2);

  Var<double> out = net.fusion.guide(make_var<double>(feat), net.fusion.squeeze_c, net.fusion.ln_c,
                                     make_var<double>(ka_t));
  REQUIRE(out->value.shape() == Shape{B, ntok, dim});

  // --- oracle: 1x1 conv -> half-pixel bilinear -> tokens -> LN -> gate -----
  const Tensor<double>& sw = net.store.params.at("fusion.squeeze_c.w")->value;
  const Tensor<double>& sb = net.store.params.at("fusion.squeeze_c.b")->value;
  const Tensor<double>& lg = net.store.params.at("fusion.ln_c.gamma")->value;
  const Tensor<double>& lb = net.store.params.at("fusion.ln_c.beta")->value;

  std::vector<double> sq(static_cast<std::size_t>(B) * dim * in_side * in_side);
  for (int n = 0; n < B; ++n)
    for (int co = 0; co < dim; ++co)
      for (int p = 0; p < in_side * in_side; ++p) {
        double acc = sb[co];
        for (int ci = 0; ci < in_ch; ++ci)
          acc += static_cast<double>(sw[co * in_ch + ci]) *
                 feat[(static_cast<std::int64_t>(n) * in_ch + ci) * in_side * in_side + p];
        sq[static_cast<std::size_t>((n * dim + co) * in_side * in_side + p)] = acc;
      }

  auto lerp = [&](int o, int in) {  // half-pixel source coordinate, clamped
    double src = (o + 0.5) * (static_cast<double>(in) / grid) - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, in - 1);
    return std::tuple<int, int, double>(lo, hi, src - lo);
  };
  std::vector<double> up(static_cast<std::size_t>(B) * dim * grid * grid);
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < dim; ++c)
      for (int oy = 0; oy < grid; ++oy) {
        auto [y0, y1, fy] = lerp(oy, in_side);
        for (int ox = 0; ox < grid; ++ox) {
          auto [x0, x1, fx] = lerp(ox, in_side);
          const double* pl = sq.data() + static_cast<std::size_t>((n * dim + c) * in_side * in_side);
          double top = pl[y0 * in_side + x0] * (1 - fx) + pl[y0 * in_side + x1] * fx;
          double bot = pl[y1 * in_side + x0] * (1 - fx) + pl[y1 * in_side + x1] * fx;
          up[static_cast<std::size_t>(((n * dim + c) * grid + oy) * grid + ox)] =
              top * (1 - fy) + bot * fy;
        }
      }

  double worst = 0;
  for (int n = 0; n < B; ++n)
    for (int t = 0; t < ntok; ++t) {
      double mean = 0, var = 0;
      for (int c = 0; c < dim; ++c)
        mean += up[static_cast<std::size_t>(((n * dim + c) * ntok) + t)];
      mean /= dim;
      for (int c = 0; c < dim; ++c) {
        double dv = up[static_cast<std::size_t>(((n * dim + c) * ntok) + t)] - mean;
        var += dv * dv;
      }
      var /= dim;
      double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int c = 0; c < dim; ++c) {
        double xhat = (up[static_cast<std::size_t>(((n * dim + c) * ntok) + t)] - mean) * inv;
        double want = (xhat * lg[c] + lb[c]) * ka_t.at(c, t) * ntok;
        worst = std::max(worst,
                         std::abs(static_cast<double>(out->value.at(n, t, c)) - want));
      }
    }
  CHECK(worst < 1e-6);
}

TEST_CASE("zeroed attention token silences the guided features") {
  FblNet<float> net(desk_cfg(64, 16, 8));
  const int dim = net.plan.attn_dim, ntok = net.plan.n_tokens;
  Tensor<float> ka_t(Shape{dim, ntok}, 1.0f / static_cast<float>(ntok));
  for (int c = 0; c < dim; ++c) ka_t.at(c, 3) = 0.0f;
  Tensor<float> c5(Shape{1, 2 * dim, 2, 2});
  Rng rng(66);
  for (std::int64_t i = 0; i < c5.numel(); ++i) c5[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  Var<float> guided = net.fusion.guide(make_var<float>(c5), net.fusion.squeeze_c, net.fusion.ln_c,
                                       make_var<float>(ka_t));
  for (int c = 0; c < dim; ++c) CHECK(guided->value.at(0, 3, c) == 0.0f);
}

TEST_CASE("cross attention with zero projections averages the value tokens") {
  FblNet<float> net(desk_cfg(64, 16, 15));
  net.store.params.at("fusion.wq.w")->value.fill(0.0f);
  net.store.params.at("fusion.wk.w")->value.fill(0.0f);
  const int dim = net.plan.attn_dim, ntok = 5;
  Rng rng(31);
  Tensor<float> c5g(Shape{2, ntok, dim}), t4g(Shape{2, ntok, dim});
  for (std::int64_t i = 0; i < c5g.numel(); ++i) c5g[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < t4g.numel(); ++i) t4g[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto [f, w] = net.fusion.cross_attention(make_var<float>(c5g), make_var<float>(t4g));
  for (std::int64_t i = 0; i < w->value.numel(); ++i)
    CHECK(std::abs(w->value[i] - 1.0f / static_cast<float>(ntok)) < 1e-7);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < dim; ++c) {
      double mean = 0;
      for (int t = 0; t < ntok; ++t) mean += c5g.at(n, t, c);
      mean /= ntok;
      for (int t = 0; t < ntok; ++t)
        CHECK(std::abs(static_cast<double>(f->value.at(n, t, c)) - mean) < 1e-6);
    }
}

TEST_CASE("cross attention over a single token is the identity") {
  FblNet<float> net(desk_cfg(64, 16, 16));
  const int dim = net.plan.attn_dim;
  Rng rng(90);
  Tensor<float> c5g(Shape{2, 1, dim}), t4g(Shape{2, 1, dim});
  for (std::int64_t i = 0; i < c5g.numel(); ++i) c5g[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < t4g.numel(); ++i) t4g[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto [f, w] = net.fusion.cross_attention(make_var<float>(c5g), make_var<float>(t4g));
  for (std::int64_t i = 0; i < w->value.numel(); ++i) CHECK(w->value[i] == 1.0f);
  CHECK(max_abs_diff(f->value, c5g) < 1e-7);
}

TEST_CASE("attention composition matches a four-token hand oracle") {
  // Raw ops, so the token count and width are free: 4 tokens, 2 channels.
  Tensor<float> q(Shape{1, 4, 2}), k(Shape{1, 4, 2});
  const float qv[8] = {0.5f, -1.0f, 2.0f, 0.25f, -0.75f, 1.5f, 0.0f, 1.0f};
  const float kv[8] = {1.0f, 0.5f, -0.5f, 1.25f, 0.75f, -1.0f, 0.25f, 0.5f};
  std::copy(qv, qv + 8, q.data());
  std::copy(kv, kv + 8, k.data());
  Var<float> scores = mul_scalar(bmm(make_var<float>(q), make_var<float>(k), true),
                                 static_cast<float>(1.0 / std::sqrt(2.0)));
  Var<float> w = softmax_lastdim(scores);
  Var<float> f = bmm(w, make_var<float>(q));

  double worst = 0;
  for (int i = 0; i < 4; ++i) {
    double row[4], z = 0;
    for (int j = 0; j < 4; ++j) {
      double dot = static_cast<double>(qv[2 * i]) * kv[2 * j] +
                   static_cast<double>(qv[2 * i + 1]) * kv[2 * j + 1];
      row[j] = std::exp(dot / std::sqrt(2.0));
      z += row[j];
    }
    for (int j = 0; j < 4; ++j) row[j] /= z;
    for (int c = 0; c < 2; ++c) {
      double want = 0;
      for (int j = 0; j < 4; ++j) want += row[j] * qv[2 * j + c];
      worst = std::max(worst, std::abs(static_cast<double>(f->value.at(0, i, c)) - want));
    }
    double rowsum = 0;
    for (int j = 0; j < 4; ++j) rowsum += w->value.at(0, i, j);
    CHECK(std::abs(rowsum - 1.0) < 1e-6);
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("cross attention is equivariant under a shared token permutation") {
  FblNet<float> net(desk_cfg(64, 16, 17));
  const int dim = net.plan.attn_dim, ntok = 6;
  Rng rng(55);
  Tensor<float> c5g(Shape{1, ntok, dim}), t4g(Shape{1, ntok, dim});
  for (std::int64_t i = 0; i < c5g.numel(); ++i) c5g[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < t4g.numel(); ++i) t4g[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto [f, w] = net.fusion.cross_attention(make_var<float>(c5g), make_var<float>(t4g));

  const int perm[6] = {3, 0, 5, 1, 4, 2};
  Tensor<float> c5p(Shape{1, ntok, dim}), t4p(Shape{1, ntok, dim});
  for (int t = 0; t < ntok; ++t)
    for (int c = 0; c < dim; ++c) {
      c5p.at(0, t, c) = c5g.at(0, perm[t], c);
      t4p.at(0, t, c) = t4g.at(0, perm[t], c);
    }
  auto [fp, wp] = net.fusion.cross_attention(make_var<float>(c5p), make_var<float>(t4p));
  double worst = 0;
  for (int t = 0; t < ntok; ++t)
    for (int c = 0; c < dim; ++c)
      worst = std::max(worst, std::abs(static_cast<double>(fp->value.at(0, t, c)) -
                                       f->value.at(0, perm[t], c)));
  CHECK(worst < 1e-5);
}

TEST_CASE("attention rows of the full forward sum to one") {
  FblNet<float> net(desk_cfg(64, 16, 18));
  Tensor<float> img = seeded_images<float>(2, 64, Rng(7));
  auto r = net.forward(img);
  const int ntok = net.plan.n_tokens;
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < ntok; ++i) {
      double s = 0;
      for (int j = 0; j < ntok; ++j) s += r.W->value.at(n, i, j);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("zeroed side branches reduce residual enrichment to the fused path") {
  FblNet<float> net(desk_cfg(64, 16, 19));
  net.store.params.at("fusion.enrich_c.conv.w")->value.fill(0.0f);
  net.store.params.at("fusion.enrich_t.conv.w")->value.fill(0.0f);
  const int dim = net.plan.attn_dim, grid = net.fusion.grid, ntok = net.plan.n_tokens;
  Rng rng(77);
  Tensor<float> f_tok(Shape{2, ntok, dim});
  Tensor<float> c5(Shape{2, 2 * dim, 2, 2}), t4(Shape{2, 2 * dim, 2, 2});
  for (std::int64_t i = 0; i < f_tok.numel(); ++i) f_tok[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < c5.numel(); ++i) c5[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < t4.numel(); ++i) t4[i] = static_cast<float>(rng.uniform(-1.0, 1.0));

  Var<float> full = net.fusion.residual_enrich(make_var<float>(f_tok), make_var<float>(c5),
                                               make_var<float>(t4), /*training=*/false);
  Var<float> bare = net.fusion.enrich_out(tokens_to_nchw(make_var<float>(f_tok), grid, grid),
                                          /*training=*/false);
  CHECK(max_abs_diff(full->value, bare->value) < 1e-7);
}

TEST_CASE("additive baseline with silent transformer is the squeezed cnn path") {
  // Fresh squeeze biases are zero, so a zero T4 contributes exactly nothing.
  FblNet<float> net(desk_cfg(64, 16, 20));
  const int dim = net.plan.attn_dim, grid = net.fusion.grid;
  Rng rng(88);
  Tensor<float> c5(Shape{2, 2 * dim, 2, 2});
  for (std::int64_t i = 0; i < c5.numel(); ++i) c5[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  Tensor<float> t4(Shape{2, 2 * dim, 2, 2}, 0.0f);
  Var<float> fused = net.fusion.fuse_baseline(make_var<float>(c5), make_var<float>(t4),
                                              FusionMode::add, false);
  Var<float> want = net.fusion.enrich_out(
      upsample_bilinear(net.fusion.squeeze_c(make_var<float>(c5)), grid, grid), false);
  CHECK(max_abs_diff(fused->value, want->value) == 0.0);
}

TEST_CASE("fusion baselines reject the guided mode and differ from each other") {
  FblNet<float> net(desk_cfg(64, 16, 21));
  const int dim = net.plan.attn_dim;
  Rng rng(99);
  Tensor<float> c5(Shape{1, 2 * dim, 2, 2}), t4(Shape{1, 2 * dim, 2, 2});
  for (std::int64_t i = 0; i < c5.numel(); ++i) c5[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (std::int64_t i = 0; i < t4.numel(); ++i) t4[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  Var<float> vc = make_var<float>(c5), vt = make_var<float>(t4);
  CHECK_THROWS_AS(net.fusion.fuse_baseline(vc, vt, FusionMode::fbl, false), FblError);
  Var<float> fa = net.fusion.fuse_baseline(vc, vt, FusionMode::add, false);
  Var<float> fc = net.fusion.fuse_baseline(vc, vt, FusionMode::cat, false);
  CHECK(fa->value.shape() == fc->value.shape());
  CHECK(max_abs_diff(fa->value, fc->value) > 1e-4);
}

// ---------------------------------------------------------------------------
// decoder head
// ---------------------------------------------------------------------------

TEST_CASE("zeroed head emits one half everywhere") {
  FblNet<float> net(desk_cfg(32, 8, 23));
  net.store.params.at("decoder.head.w")->value.fill(0.0f);
  net.store.params.at("decoder.head.b")->value.fill(0.0f);
  Tensor<float> img = seeded_images<float>(2, 32, Rng(2));
  auto r = net.forward(img);
  for (std::int64_t i = 0; i < r.A->value.numel(); ++i) REQUIRE(r.A->value[i] == 0.5f);
}

TEST_CASE("head matches a conv-plus-sigmoid oracle") {
  FblNet<float> net(desk_cfg(32, 8, 24));
  const int ch = net.plan.d[4].c, side = 32;
  Rng rng(25);
  Tensor<float> d4(Shape{2, ch, side, side});
  for (std::int64_t i = 0; i < d4.numel(); ++i) d4[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
  Var<float> a = net.decoder.head(make_var<float>(d4));
  const Tensor<float>& hw = net.store.params.at("decoder.head.w")->value;
  const Tensor<float>& hb = net.store.params.at("decoder.head.b")->value;
  double worst = 0;
  for (int n = 0; n < 2; ++n)
    for (int p = 0; p < side * side; ++p) {
      double acc = hb[0];
      for (int c = 0; c < ch; ++c)
        acc += static_cast<double>(hw[c]) * d4[(static_cast<std::int64_t>(n) * ch + c) * side * side + p];
      double want = 1.0 / (1.0 + std::exp(-acc));
      worst = std::max(worst, std::abs(static_cast<double>(a->value[n * side * side + p]) - want));
    }
  CHECK(worst < 1e-6);
}

// ---------------------------------------------------------------------------
// mode equivalences
// ---------------------------------------------------------------------------

TEST_CASE("uniform knowledge makes guided fusion match the knowledge-free mode") {
  ModelConfig with = desk_cfg(64, 16, 42);
  ModelConfig without = with;
  without.fusion_mode = FusionMode::no_fbl;
  FblNet<float> a(with), b(without);
  a.set_train(false);
  b.set_train(false);
  NoGradGuard ng;
  Tensor<float> img = seeded_images<float>(2, 64, Rng(4));
  auto ra = a.forward(img);
  auto rb = b.forward(img);
  // A fresh all-ones buffer resamples to a constant map, its per-channel
  // softmax is uniform, and the gate scaling cancels exactly.
  CHECK(max_abs_diff(ra.A->value, rb.A->value) < 1e-6);
  CHECK(max_abs_diff(ra.F->value, rb.F->value) < 1e-6);
}

TEST_CASE("knowledge contents are ignored outside fbl mode") {
  ModelConfig cfg = desk_cfg(64, 16, 43);
  cfg.fusion_mode = FusionMode::no_fbl;
  FblNet<float> net(cfg);
  net.set_train(false);
  NoGradGuard ng;
  Tensor<float> img = seeded_images<float>(1, 64, Rng(12));
  auto before = net.forward(img);
  Tensor<float>& K = net.store.buffers.at("knowledge.K");
  Rng rng(700);
  for (std::int64_t i = 0; i < K.numel(); ++i) K[i] = static_cast<float>(rng.uniform(-5.0, 5.0));
  auto after = net.forward(img);
  CHECK(max_abs_diff(before.A->value, after.A->value) == 0.0);
}

TEST_CASE("knowledge updates are scheduled only for fbl training") {
  ModelConfig cfg = desk_cfg(32, 8, 44);
  FblNet<float> net(cfg);
  Tensor<float> img = seeded_images<float>(2, 32, Rng(1));
  auto r = net.forward(img);
  net.set_train(false);
  CHECK_THROWS_AS(net.update_knowledge_from(r), FblError);
  net.set_train(true);

  ModelConfig plain = cfg;
  plain.fusion_mode = FusionMode::add;
  FblNet<float> nb(plain);
  auto rb = nb.forward(img);
  CHECK_THROWS_AS(nb.update_knowledge_from(rb), FblError);

  net.update_knowledge_from(r);  // the guided path accepts it
  CHECK(net.iteration() == 1);
}

// ---------------------------------------------------------------------------
// end-to-end parameter gradients
// ---------------------------------------------------------------------------

TEST_CASE("end-to-end parameter gradients match finite differences") {
  ModelConfig cfg = desk_cfg(32, 8, 101);
  FblNet<double> net(cfg);
  const int S = cfg.input_side, B = 2;
  Rng rng(606);
  Tensor<double> img = seeded_images<double>(B, S, Rng(51));
  // Smooth synthetic ground truth: a blob per sample plus a floor.
  Tensor<double> gt(Shape{B, S, S});
  for (int n = 0; n < B; ++n) {
    double cy = rng.uniform(8.0, 24.0), cx = rng.uniform(8.0, 24.0);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        gt.at(n, y, x) = 0.05 + std::exp(-d2 / 40.0);
      }
  }
  std::vector<std::vector<std::int64_t>> fix(B);
  for (int n = 0; n < B; ++n)
    for (int f = 0; f < 6; ++f)
      fix[static_cast<std::size_t>(n)].push_back(
          static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(S * S))));
  LossWeights lw;

  auto loss_value = [&]() {
    auto r = net.forward(img);
    double total = 0;
    for (int n = 0; n < B; ++n) {
      Var<double> p = reshape(select_batch(r.A, n), Shape{S * S});
      Tensor<double> q(Shape{S * S});
      std::copy(gt.data() + n * S * S, gt.data() + (n + 1) * S * S, q.data());
      total += saliency_loss(p, q, fix[static_cast<std::size_t>(n)], lw, cfg.epsilon_kl)->value[0];
    }
    return total;
  };

  // Analytic gradients from one taped pass.
  net.store.zero_grad();
  auto r = net.forward(img);
  Var<double> total;
  for (int n = 0; n < B; ++n) {
    Var<double> p = reshape(select_batch(r.A, n), Shape{S * S});
    Tensor<double> q(Shape{S * S});
    std::copy(gt.data() + n * S * S, gt.data() + (n + 1) * S * S, q.data());
    Var<double> l = saliency_loss(p, q, fix[static_cast<std::size_t>(n)], lw, cfg.epsilon_kl);
    total = total ? add(total, l) : l;
  }
  backward(total);

  // Sample 50 live (parameter, element) probes across the whole store.
  std::vector<std::pair<std::string, std::int64_t>> probes;
  std::vector<std::string> names;
  for (const auto& [name, p] : net.store.params)
    if (!p->grad.empty()) names.push_back(name);
  REQUIRE(names.size() > 20);
  Rng pick(909);
  while (probes.size() < 50) {
    const std::string& name = names[static_cast<std::size_t>(pick.below(names.size()))];
    const Var<double>& p = net.store.params.at(name);
    probes.emplace_back(name, static_cast<std::int64_t>(pick.below(
                                  static_cast<std::uint64_t>(p->value.numel()))));
  }

  NoGradGuard ng;
  // Small step: BN/ReLU compositions have measure-zero kinks that a coarse
  // probe can straddle; double precision keeps the quotient noise ~1e-9.
  const double h = 1e-6;
  double worst = 0;
  for (const auto& [name, idx] : probes) {
    Var<double> p = net.store.params.at(name);
    double keep = p->value[idx];
    p->value[idx] = keep + h;
    double up = loss_value();
    p->value[idx] = keep - h;
    double down = loss_value();
    p->value[idx] = keep;
    double fd = (up - down) / (2 * h);
    double got = p->grad[idx];
    double rel = std::abs(got - fd) / std::max({1.0, std::abs(got), std::abs(fd)});
    INFO(name, "[", idx, "] analytic ", got, " fd ", fd);
    CHECK(rel < 1e-3);
    worst = std::max(worst, rel);
  }
  MESSAGE("worst end-to-end relative gradient error: ", worst);
}
