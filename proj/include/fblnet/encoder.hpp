#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fblnet/config.hpp"
#include "fblnet/nn.hpp"

namespace fblnet {

// Residual block with stride-2 downsampling: two 3x3 convs plus a projected
// shortcut, post-activation style.
template <typename T>
struct ResBlock {
  Conv2dLayer<T> conv1, conv2, proj;
  BatchNorm2dLayer<T> bn1, bn2, bn_proj;

  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& name, int ci, int co, Rng& rng)
      : conv1(ps, name + ".conv1", ci, co, 3, 2, 1, rng, false),
        conv2(ps, name + ".conv2", co, co, 3, 1, 1, rng, false),
        proj(ps, name + ".proj", ci, co, 1, 2, 0, rng, false),
        bn1(ps, name + ".bn1", co),
        bn2(ps, name + ".bn2", co),
        bn_proj(ps, name + ".bn_proj", co) {}

  Var<T> operator()(const Var<T>& x, bool training) const {
    Var<T> h = relu(bn1(conv1(x), training));
    h = bn2(conv2(h), training);
    Var<T> s = bn_proj(proj(x), training);
    return relu(add(h, s));
  }
};

// Five-stage convolutional pathway: stride-2 stem then four residual stages,
// widths w,w,2w,4w,8w, sides S/2..S/32.
template <typename T>
struct CnnEncoder {
  Conv2dLayer<T> stem;
  BatchNorm2dLayer<T> stem_bn;
  std::array<ResBlock<T>, 4> stages;

  CnnEncoder() = default;
  CnnEncoder(ParamStore<T>& ps, const std::string& name, int w, Rng& rng)
      : stem(ps, name + ".stem", 3, w, 7, 2, 3, rng, false), stem_bn(ps, name + ".stem_bn", w) {
    const int ci[4] = {w, w, 2 * w, 4 * w};
    const int co[4] = {w, 2 * w, 4 * w, 8 * w};
    for (int i = 0; i < 4; ++i)
      stages[i] = ResBlock<T>(ps, name + ".stage" + std::to_string(i + 1), ci[i], co[i], rng);
  }

  std::array<Var<T>, 5> operator()(const Var<T>& images, bool training) const {
    std::array<Var<T>, 5> c;
    c[0] = relu(stem_bn(stem(images), training));
    for (int i = 0; i < 4; ++i) c[i + 1] = stages[i](c[i], training);
    return c;
  }
};

// Single-head self-attention within non-overlapping windows.
template <typename T>
struct WindowAttention {
  LinearLayer<T> q, k, v, proj;
  int dim = 0;

  WindowAttention() = default;
  WindowAttention(ParamStore<T>& ps, const std::string& name, int d, Rng& rng) : dim(d) {
    q = LinearLayer<T>(ps, name + ".q", d, d, rng, true, T(1));
    k = LinearLayer<T>(ps, name + ".k", d, d, rng, true, T(1));
    v = LinearLayer<T>(ps, name + ".v", d, d, rng, true, T(1));
    proj = LinearLayer<T>(ps, name + ".proj", d, d, rng, true, T(1));
  }

  // windows: (G, win*win, D)
  Var<T> operator()(const Var<T>& windows) const {
    Var<T> scores = bmm(q(windows), k(windows), /*trans_b=*/true);
    scores = mul_scalar(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim))));
    Var<T> attn = softmax_lastdim(scores);
    return proj(bmm(attn, v(windows)));
  }
};

// Pre-norm transformer block: windowed attention and a ratio-2 MLP, both with
// residual connections.
template <typename T>
struct TransBlock {
  LayerNormLayer<T> ln1, ln2;
  WindowAttention<T> attn;
  LinearLayer<T> mlp1, mlp2;

  TransBlock() = default;
  TransBlock(ParamStore<T>& ps, const std::string& name, int d, Rng& rng)
      : ln1(ps, name + ".ln1", d),
        ln2(ps, name + ".ln2", d),
        attn(ps, name + ".attn", d, rng),
        mlp1(ps, name + ".mlp1", d, 2 * d, rng),
        mlp2(ps, name + ".mlp2", 2 * d, d, rng) {}

  // tokens: (B, side*side, D)
  Var<T> operator()(const Var<T>& tokens, int side, int win) const {
    int batch = tokens->value.dim(0);
    Var<T> wnd = window_partition(ln1(tokens), side, win);
    Var<T> mixed = window_merge(attn(wnd), side, win, batch);
    Var<T> x = add(tokens, mixed);
    return add(x, mlp2(relu(mlp1(ln2(x)))));
  }
};

// Patch merging between stages: 2x2 token gather, LN, linear 4C -> 2C.
template <typename T>
struct PatchMerge {
  LayerNormLayer<T> ln;
  LinearLayer<T> reduce;

  PatchMerge() = default;
  PatchMerge(ParamStore<T>& ps, const std::string& name, int c, Rng& rng)
      : ln(ps, name + ".ln", 4 * c), reduce(ps, name + ".reduce", 4 * c, 2 * c, rng, false, T(1)) {}

  Var<T> operator()(const Var<T>& tokens, int side) const {
    return reduce(ln(token_merge_2x2(tokens, side)));
  }
};

// Four-stage windowed-attention pathway: 4x4 patch embedding then attention
// blocks with patch merging between stages; widths w..8w, sides S/4..S/32.
template <typename T>
struct TransEncoder {
  Conv2dLayer<T> patch_embed;
  LayerNormLayer<T> embed_ln;
  std::array<TransBlock<T>, 4> blocks;
  std::array<PatchMerge<T>, 3> merges;
  int window = 0;

  TransEncoder() = default;
  TransEncoder(ParamStore<T>& ps, const std::string& name, int w, int window_, Rng& rng)
      : patch_embed(ps, name + ".patch_embed", 3, w, 4, 4, 0, rng),
        embed_ln(ps, name + ".embed_ln", w),
        window(window_) {
    for (int i = 0; i < 4; ++i)
      blocks[i] = TransBlock<T>(ps, name + ".block" + std::to_string(i + 1), w << i, rng);
    for (int i = 0; i < 3; ++i)
      merges[i] = PatchMerge<T>(ps, name + ".merge" + std::to_string(i + 1), w << i, rng);
  }

  std::array<Var<T>, 4> operator()(const Var<T>& images) const {
    const Shape& s = images->value.shape();
    FBL_CHECK(s.size() == 4 && s[1] == 3, Err::Shape, "transformer expects (B,3,S,S) input");
    int side = s[2] / 4;
    Var<T> tok = embed_ln(nchw_to_tokens(patch_embed(images)));
    std::array<Var<T>, 4> t;
    for (int i = 0; i < 4; ++i) {
      FBL_CHECK(side % window == 0, Err::Window,
                "stage side " + std::to_string(side) + " not divisible by window " + std::to_string(window));
      tok = blocks[i](tok, side, window);
      t[i] = tokens_to_nchw(tok, side, side);
      if (i < 3) {
        tok = merges[i](tok, side);
        side /= 2;
      }
    }
    return t;
  }
};

}  // namespace fblnet
