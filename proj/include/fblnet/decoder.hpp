#pragma once

#include <array>
#include <string>

#include "fblnet/config.hpp"
#include "fblnet/nn.hpp"

namespace fblnet {

// Decoder ladder d0..d4 with paired CNN/transformer skips and the sigmoid
// head. Channels 4w,2w,w,w/2,w/4 at sides S/16..S.
template <typename T>
struct DecoderModule {
  ConvBlock<T> d0_block;  // 4w -> 4w, no upsample
  struct MidBlock {
    ConvBlock<T> skip;  // concat(C,T) -> target channels
    ConvBlock<T> main;  // d_prev -> target channels
  };
  std::array<MidBlock, 3> mids;  // D1..D3
  ConvBlock<T> d4_main;          // w/2 -> w/4, skipless
  Conv2dLayer<T> head_conv;      // 1x1 -> 1

  DecoderModule() = default;
  DecoderModule(ParamStore<T>& ps, const std::string& name, int w, Rng& rng)
      : d0_block(ps, name + ".d0", 4 * w, 4 * w, 3, 1, 1, rng) {
    // D1: concat(C4,T3)=8w and d0=4w -> 2w; D2: 4w and 2w -> w; D3: 2w and w -> w/2
    const int skip_in[3] = {8 * w, 4 * w, 2 * w};
    const int main_in[3] = {4 * w, 2 * w, w};
    const int out_ch[3] = {2 * w, w, w / 2};
    for (int i = 0; i < 3; ++i) {
      std::string base = name + ".d" + std::to_string(i + 1);
      mids[i].skip = ConvBlock<T>(ps, base + ".skip", skip_in[i], out_ch[i], 3, 1, 1, rng);
      mids[i].main = ConvBlock<T>(ps, base + ".main", main_in[i], out_ch[i], 3, 1, 1, rng);
    }
    d4_main = ConvBlock<T>(ps, name + ".d4", w / 2, w / 4, 3, 1, 1, rng);
    head_conv = Conv2dLayer<T>(ps, name + ".head", w / 4, 1, 1, 1, 0, rng);
  }

  // out = up(ConvBlock(concat(skip_c, skip_t))) + up(ConvBlock(d_prev))
  static Var<T> block(const MidBlock& b, const Var<T>& d_prev, const Var<T>& skip_c,
                      const Var<T>& skip_t, bool training) {
    const Shape& sc = skip_c->value.shape();
    FBL_CHECK(same_shape(skip_c->value, skip_t->value), Err::Shape,
              "decoder skips disagree: " + shape_str(sc) + " vs " + shape_str(skip_t->value.shape()));
    FBL_CHECK(sc[2] == d_prev->value.dim(2) && sc[3] == d_prev->value.dim(3), Err::Shape,
              "decoder skip resolution does not match the ladder");
    int side = 2 * sc[2];
    Var<T> s = upsample_bilinear(b.skip(concat_channels(skip_c, skip_t), training), side, side);
    Var<T> m = upsample_bilinear(b.main(d_prev, training), side, side);
    return add(s, m);
  }

  // C holds C1..C5, Tt holds T1..T4; skips pair (C4,T3), (C3,T2), (C2,T1).
  std::array<Var<T>, 5> decode(const Var<T>& fused, const std::array<Var<T>, 5>& C,
                               const std::array<Var<T>, 4>& Tt, bool training) const {
    std::array<Var<T>, 5> d;
    d[0] = d0_block(fused, training);
    d[1] = block(mids[0], d[0], C[3], Tt[2], training);
    d[2] = block(mids[1], d[1], C[2], Tt[1], training);
    d[3] = block(mids[2], d[2], C[1], Tt[0], training);
    int side = 2 * d[3]->value.dim(2);
    d[4] = upsample_bilinear(d4_main(d[3], training), side, side);
    return d;
  }

  Var<T> head(const Var<T>& d4) const { return sigmoid(head_conv(d4)); }
};

}  // namespace fblnet
