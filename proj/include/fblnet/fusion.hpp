#pragma once

#include <cmath>
#include <string>

#include "fblnet/config.hpp"
#include "fblnet/nn.hpp"

namespace fblnet {

// Knowledge-guided cross-attention fusion of C5 and T4, plus the add/cat
// baselines. The fusion grid is (4w, S/16, S/16); tokens are its N_t = (S/16)^2
// positions with D = 4w channels.
template <typename T>
struct FusionModule {
  Conv2dLayer<T> squeeze_c, squeeze_t;  // 1x1, 8w -> 4w
  LayerNormLayer<T> ln_c, ln_t;
  LinearLayer<T> wq, wk;                     // D -> D, no bias
  ConvBlock<T> enrich_c, enrich_t, enrich_out;
  Conv2dLayer<T> cat_proj;                   // 1x1, 8w -> 4w (cat baseline)
  int grid = 0, dim = 0, ntok = 0;

  struct Fused {
    Var<T> F_out;  // (B, 4w, g, g)
    Var<T> K_a;    // (D, N_t) or empty for add/cat
    Var<T> W;      // (B, N_t, N_t) attention rows, or empty for add/cat
  };

  FusionModule() = default;
  FusionModule(ParamStore<T>& ps, const std::string& name, const ShapePlan& plan, Rng& rng)
      : grid(plan.K_fusion_shape.h), dim(plan.attn_dim), ntok(plan.n_tokens) {
    int w8 = 2 * dim;
    squeeze_c = Conv2dLayer<T>(ps, name + ".squeeze_c", w8, dim, 1, 1, 0, rng);
    squeeze_t = Conv2dLayer<T>(ps, name + ".squeeze_t", w8, dim, 1, 1, 0, rng);
    ln_c = LayerNormLayer<T>(ps, name + ".ln_c", dim);
    ln_t = LayerNormLayer<T>(ps, name + ".ln_t", dim);
    wq = LinearLayer<T>(ps, name + ".wq", dim, dim, rng, false, T(1));
    wk = LinearLayer<T>(ps, name + ".wk", dim, dim, rng, false, T(1));
    enrich_c = ConvBlock<T>(ps, name + ".enrich_c", w8, dim, 3, 1, 1, rng);
    enrich_t = ConvBlock<T>(ps, name + ".enrich_t", w8, dim, 3, 1, 1, rng);
    enrich_out = ConvBlock<T>(ps, name + ".enrich_out", dim, dim, 3, 1, 1, rng);
    cat_proj = Conv2dLayer<T>(ps, name + ".cat_proj", w8, dim, 1, 1, 0, rng);
  }

  // Softmax over tokens, independently per channel; each channel of the
  // result sums to 1.
  Var<T> knowledge_attention(const Var<T>& k_fusion) const {
    const Shape& s = k_fusion->value.shape();
    FBL_CHECK(s == Shape({1, dim, grid, grid}), Err::Shape,
              "knowledge_attention: unexpected fusion view " + shape_str(s));
    return softmax_lastdim(reshape(k_fusion, Shape{dim, ntok}));
  }

  Var<T> uniform_attention() const {
    return make_var<T>(Tensor<T>(Shape{dim, ntok}, T(1) / static_cast<T>(ntok)));
  }

  // squeeze -> upsample to the fusion grid -> tokens -> LN -> K_a gating.
  // Gating is scaled by N_t so a uniform K_a is an exact identity.
  Var<T> guide(const Var<T>& feat, const Conv2dLayer<T>& squeeze, const LayerNormLayer<T>& ln,
               const Var<T>& ka) const {
    Var<T> tok = nchw_to_tokens(upsample_bilinear(squeeze(feat), grid, grid));
    return guide_mul(ln(tok), ka, static_cast<T>(ntok));
  }

  // W = softmax((W_q C5_g)(W_k T4_g)^T / sqrt(D)); F = W V with V = C5_g.
  std::pair<Var<T>, Var<T>> cross_attention(const Var<T>& c5g, const Var<T>& t4g) const {
    Var<T> scores = bmm(wq(c5g), wk(t4g), /*trans_b=*/true);
    scores = mul_scalar(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim))));
    Var<T> w = softmax_lastdim(scores);
    return {bmm(w, c5g), w};
  }

  // F_out = ConvBlock(F + ConvBlock(up(C5)) + ConvBlock(up(T4))), side
  // branches taking the raw 8w-channel features.
  Var<T> residual_enrich(const Var<T>& f_tokens, const Var<T>& c5, const Var<T>& t4,
                         bool training) const {
    Var<T> f = tokens_to_nchw(f_tokens, grid, grid);
    Var<T> side_c = enrich_c(upsample_bilinear(c5, grid, grid), training);
    Var<T> side_t = enrich_t(upsample_bilinear(t4, grid, grid), training);
    return enrich_out(add(add(f, side_c), side_t), training);
  }

  Var<T> fuse_baseline(const Var<T>& c5, const Var<T>& t4, FusionMode mode, bool training) const {
    FBL_CHECK(mode == FusionMode::add || mode == FusionMode::cat, Err::Mode,
              "fuse_baseline expects add or cat, got " + to_string(mode));
    Var<T> a = upsample_bilinear(squeeze_c(c5), grid, grid);
    Var<T> b = upsample_bilinear(squeeze_t(t4), grid, grid);
    Var<T> x = mode == FusionMode::add ? add(a, b) : cat_proj(concat_channels(a, b));
    return enrich_out(x, training);
  }

  // k_fusion is required for fbl mode and ignored otherwise.
  Fused forward(const Var<T>& c5, const Var<T>& t4, const Var<T>& k_fusion, FusionMode mode,
                bool training) const {
    Fused out;
    if (mode == FusionMode::add || mode == FusionMode::cat) {
      out.F_out = fuse_baseline(c5, t4, mode, training);
      return out;
    }
    if (mode == FusionMode::fbl) {
      FBL_CHECK(k_fusion != nullptr, Err::Mode, "fbl fusion requires a knowledge view");
      out.K_a = knowledge_attention(k_fusion);
    } else {
      out.K_a = uniform_attention();
    }
    Var<T> c5g = guide(c5, squeeze_c, ln_c, out.K_a);
    Var<T> t4g = guide(t4, squeeze_t, ln_t, out.K_a);
    auto [f, w] = cross_attention(c5g, t4g);
    out.W = w;
    out.F_out = residual_enrich(f, c5, t4, training);
    return out;
  }
};

}  // namespace fblnet
