#pragma once

#include <array>
#include <cmath>
#include <string>

#include "fblnet/config.hpp"
#include "fblnet/nn.hpp"

namespace fblnet {

template <typename T>
Tensor<T> select_feedback(const std::array<Var<T>, 5>& d, FeedbackNode node) {
  int idx = static_cast<int>(node);
  FBL_CHECK(idx >= 0 && idx < 5 && d[static_cast<std::size_t>(idx)], Err::Node,
            "feedback node " + to_string(node) + " not available");
  return d[static_cast<std::size_t>(idx)]->value;  // detached copy
}

// Persistent incremental knowledge: the buffer K, its iteration counter, the
// frozen Conv+BN of the update rule, and the trainable resize projection that
// feeds fusion. Everything persistent lives in the store so checkpoints see
// it; the update-rule tensors are buffers (never gradient-trained), while the
// resize projection is an ordinary parameter.
template <typename T>
struct KnowledgeModule {
  Tensor<T>* K = nullptr;
  Tensor<T>* iteration = nullptr;
  Tensor<T>*up_w = nullptr, *up_b = nullptr;
  Tensor<T>*up_gamma = nullptr, *up_beta = nullptr, *up_rm = nullptr, *up_rv = nullptr;
  Var<T> proj_w, proj_b;
  StageShape k_shape, fusion_shape;

  KnowledgeModule() = default;
  KnowledgeModule(ParamStore<T>& ps, const ShapePlan& plan, Rng& rng)
      : k_shape(plan.K_shape), fusion_shape(plan.K_fusion_shape) {
    int ck = k_shape.c;
    K = &ps.buffer("knowledge.K", Tensor<T>(Shape{ck, k_shape.h, k_shape.w}, T(1)));
    iteration = &ps.buffer("knowledge.iteration", Tensor<T>(Shape{1}, T(0)));
    up_w = &ps.buffer("knowledge.update.conv.w",
                      fanin_normal<T>(Shape{ck, 2 * ck, 3, 3}, static_cast<std::int64_t>(2 * ck) * 9, rng));
    up_b = &ps.buffer("knowledge.update.conv.b", Tensor<T>(Shape{ck}, T(0)));
    up_gamma = &ps.buffer("knowledge.update.bn.gamma", Tensor<T>(Shape{ck}, T(1)));
    up_beta = &ps.buffer("knowledge.update.bn.beta", Tensor<T>(Shape{ck}, T(0)));
    up_rm = &ps.buffer("knowledge.update.bn.run_mean", Tensor<T>(Shape{ck}, T(0)));
    up_rv = &ps.buffer("knowledge.update.bn.run_var", Tensor<T>(Shape{ck}, T(1)));
    proj_w = ps.param("knowledge.resize.w",
                      fanin_normal<T>(Shape{fusion_shape.c, ck, 1, 1}, ck, rng));
    proj_b = ps.param("knowledge.resize.b", Tensor<T>(Shape{fusion_shape.c}, T(0)));
  }

  int iter() const { return static_cast<int>((*iteration)[0]); }

  // K' = mean_over_batch(ReLU(BN(Conv(K (+) B))) + K). Runs entirely off the
  // tape. BN normalizes with the running statistics held before this call and
  // then advances them from the batch moments of the conv output, so repeated
  // updates are deliberately not idempotent.
  void update(const Tensor<T>& b_batch) {
    const Shape& bs = b_batch.shape();
    FBL_CHECK(bs.size() == 4 && bs[1] == k_shape.c && bs[2] == k_shape.h && bs[3] == k_shape.w,
              Err::Shape,
              "feedback feature shape " + shape_str(bs) + " does not match knowledge plan");
    const int bn = bs[0], ck = k_shape.c, h = k_shape.h, w = k_shape.w;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t ckk = static_cast<std::int64_t>(2 * ck) * 9;

    // conv(concat(K, B_n)) for every sample
    Tensor<T> conv_out(Shape{bn, ck, h, w});
    Tensor<T> cat(Shape{2 * ck, h, w});
    std::copy(K->data(), K->data() + ck * plane, cat.data());
    Tensor<T> col(Shape{static_cast<int>(ckk), static_cast<int>(plane)});
    for (int n = 0; n < bn; ++n) {
      std::copy(b_batch.data() + static_cast<std::int64_t>(n) * ck * plane,
                b_batch.data() + static_cast<std::int64_t>(n + 1) * ck * plane,
                cat.data() + ck * plane);
      detail::im2col(cat.data(), 2 * ck, h, w, 3, 3, 1, 1, h, w, col.data());
      T* o = conv_out.data() + static_cast<std::int64_t>(n) * ck * plane;
      kernels::gemm_t<T>('n', 'n', ck, static_cast<int>(plane), static_cast<int>(ckk), T(1),
                         up_w->data(), static_cast<int>(ckk), col.data(), static_cast<int>(plane),
                         T(0), o, static_cast<int>(plane));
      for (int c = 0; c < ck; ++c)
        for (std::int64_t i = 0; i < plane; ++i) o[c * plane + i] += (*up_b)[c];
    }

    // normalize with pre-update running stats, ReLU, +K, batch mean
    const T eps = T(1e-5), momentum = T(0.1);
    const std::int64_t m = static_cast<std::int64_t>(bn) * plane;
    Tensor<T> k_next(Shape{ck, h, w}, T(0));
    for (int c = 0; c < ck; ++c) {
      T g = (*up_gamma)[c] / std::sqrt((*up_rv)[c] + eps);
      T sh = (*up_beta)[c] - (*up_rm)[c] * g;
      T bsum = T(0), bsq = T(0);
      for (int n = 0; n < bn; ++n) {
        const T* x = conv_out.data() + (static_cast<std::int64_t>(n) * ck + c) * plane;
        const T* kp = K->data() + static_cast<std::int64_t>(c) * plane;
        T* acc = k_next.data() + static_cast<std::int64_t>(c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          bsum += x[i];
          bsq += x[i] * x[i];
          T y = x[i] * g + sh;
          acc[i] += (y > T(0) ? y : T(0)) + kp[i];
        }
      }
      T mu = bsum / static_cast<T>(m);
      T var = bsq / static_cast<T>(m) - mu * mu;
      if (var < T(0)) var = T(0);
      T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      (*up_rm)[c] = (T(1) - momentum) * (*up_rm)[c] + momentum * mu;
      (*up_rv)[c] = (T(1) - momentum) * (*up_rv)[c] + momentum * unbiased;
    }
    T inv = T(1) / static_cast<T>(bn);
    for (std::int64_t i = 0; i < k_next.numel(); ++i) (*K)[i] = k_next[i] * inv;
    FBL_CHECK(K->all_finite(), Err::NanLoss, "knowledge update produced non-finite values");
    (*iteration)[0] += T(1);
  }

  // Bilinear resample of K to the fusion grid plus the learned 1x1 channel
  // projection; returns a batchless (1, 4w, g, g) map on the tape. K itself is
  // a constant leaf — gradient reaches only the projection.
  Var<T> fusion_view() const {
    Tensor<T> resized = detail::bilinear_resize_plain(*K, fusion_shape.h, fusion_shape.w);
    Var<T> kvar = make_var<T>(resized.reshaped(Shape{1, k_shape.c, fusion_shape.h, fusion_shape.w}));
    return conv2d(kvar, proj_w, proj_b, 1, 0);
  }
};

}  // namespace fblnet
