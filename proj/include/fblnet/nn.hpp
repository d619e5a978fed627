#pragma once

#include <cmath>
#include <map>
#include <string>

#include "fblnet/autodiff.hpp"
#include "fblnet/rng.hpp"
#include "fblnet/tensor.hpp"

namespace fblnet {

// Owns every trainable tensor and persistent buffer, keyed by dotted path.
// std::map keeps iteration order stable, which pins down optimizer-state and
// checkpoint layout.
template <typename T>
struct ParamStore {
  std::map<std::string, Var<T>> params;
  std::map<std::string, Tensor<T>> buffers;

  Var<T> param(const std::string& name, Tensor<T> init) {
    FBL_CHECK(!params.count(name), Err::Config, "duplicate parameter " + name);
    auto v = std::make_shared<TapeNode<T>>();
    v->value = std::move(init);
    v->requires_grad = true;
    params.emplace(name, v);
    return v;
  }

  Tensor<T>& buffer(const std::string& name, Tensor<T> init) {
    FBL_CHECK(!buffers.count(name), Err::Config, "duplicate buffer " + name);
    return buffers.emplace(name, std::move(init)).first->second;
  }

  void zero_grad() {
    for (auto& [name, p] : params)
      if (!p->grad.empty()) p->grad.fill(T(0));
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params) n += p->value.numel();
    return n;
  }
};

template <typename T>
Tensor<T> fanin_normal(const Shape& shape, std::int64_t fan_in, Rng& rng, T gain = T(2)) {
  T std = std::sqrt(gain / static_cast<T>(fan_in));
  return Tensor<T>::randn(shape, rng, std);
}

template <typename T>
struct Conv2dLayer {
  Var<T> w, b;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore<T>& ps, const std::string& name, int ci, int co, int k, int stride_,
              int pad_, Rng& rng, bool bias = true)
      : stride(stride_), pad(pad_) {
    w = ps.param(name + ".w", fanin_normal<T>(Shape{co, ci, k, k}, static_cast<std::int64_t>(ci) * k * k, rng));
    if (bias) b = ps.param(name + ".b", Tensor<T>(Shape{co}, T(0)));
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct BatchNorm2dLayer {
  Var<T> gamma, beta;
  Tensor<T>* run_mean = nullptr;
  Tensor<T>* run_var = nullptr;

  BatchNorm2dLayer() = default;
  BatchNorm2dLayer(ParamStore<T>& ps, const std::string& name, int c) {
    gamma = ps.param(name + ".gamma", Tensor<T>(Shape{c}, T(1)));
    beta = ps.param(name + ".beta", Tensor<T>(Shape{c}, T(0)));
    run_mean = &ps.buffer(name + ".run_mean", Tensor<T>(Shape{c}, T(0)));
    run_var = &ps.buffer(name + ".run_var", Tensor<T>(Shape{c}, T(1)));
  }

  Var<T> operator()(const Var<T>& x, bool training) const {
    return batchnorm2d(x, gamma, beta, run_mean, run_var, training);
  }
};

template <typename T>
struct LayerNormLayer {
  Var<T> gamma, beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParamStore<T>& ps, const std::string& name, int d) {
    gamma = ps.param(name + ".gamma", Tensor<T>(Shape{d}, T(1)));
    beta = ps.param(name + ".beta", Tensor<T>(Shape{d}, T(0)));
  }

  Var<T> operator()(const Var<T>& x) const { return layernorm(x, gamma, beta); }
};

template <typename T>
struct LinearLayer {
  Var<T> w, b;

  LinearLayer() = default;
  // gain 2 is the ReLU-path default; attention projections pass gain 1 so the
  // weight scale is 1/sqrt(depth).
  LinearLayer(ParamStore<T>& ps, const std::string& name, int ci, int co, Rng& rng,
              bool bias = true, T gain = T(2)) {
    w = ps.param(name + ".w", fanin_normal<T>(Shape{co, ci}, ci, rng, gain));
    if (bias) b = ps.param(name + ".b", Tensor<T>(Shape{co}, T(0)));
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

// Conv(...)-BN-ReLU, the workhorse block of the fusion and decoder stages.
template <typename T>
struct ConvBlock {
  Conv2dLayer<T> conv;
  BatchNorm2dLayer<T> bn;

  ConvBlock() = default;
  ConvBlock(ParamStore<T>& ps, const std::string& name, int ci, int co, int k, int stride, int pad,
            Rng& rng)
      : conv(ps, name + ".conv", ci, co, k, stride, pad, rng, /*bias=*/false),
        bn(ps, name + ".bn", co) {}

  Var<T> operator()(const Var<T>& x, bool training) const { return relu(bn(conv(x), training)); }
};

}  // namespace fblnet
