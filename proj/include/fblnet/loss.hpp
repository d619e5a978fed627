#pragma once

#include <cmath>

#include "fblnet/autodiff.hpp"
#include "fblnet/errors.hpp"

namespace fblnet {

struct LossWeights {
  double mu = 1.0;
  double eta = 0.1;
  double xi = 0.1;
};

// L = mu * kldiv(norm(P), norm(Q)) - eta * nss(P, fix) - xi * cc(P, Q)
// for a single flattened map. P must be strictly positive (it comes from the
// sigmoid head); Q is ground truth in [0,1].
template <typename T>
Var<T> saliency_loss(const Var<T>& p_flat, const Tensor<T>& q_flat,
                     const std::vector<std::int64_t>& fix_idx, const LossWeights& w,
                     double epsilon_kl) {
  FBL_CHECK(p_flat->value.rank() == 1, Err::Shape, "saliency_loss expects a flat map");
  FBL_CHECK(p_flat->value.numel() == q_flat.numel(), Err::Shape,
            "saliency_loss: P and Q differ in size");
  FBL_CHECK(!fix_idx.empty(), Err::EmptyFix, "saliency_loss: no fixations");
  const std::int64_t n = q_flat.numel();

  // Host-side Q statistics; Q carries no gradient.
  T q_sum = T(0), q_mean = T(0);
  for (std::int64_t i = 0; i < n; ++i) q_sum += q_flat[i];
  FBL_CHECK(q_sum > 0, Err::ZeroMap, "saliency_loss: ground truth sums to zero");
  // Constancy is tested exactly; the accumulated variance of a constant map
  // can come out as a tiny nonzero value.
  bool q_const = true;
  for (std::int64_t i = 1; i < n && q_const; ++i) q_const = q_flat[i] == q_flat[0];
  FBL_CHECK(!q_const, Err::ConstMap, "saliency_loss: constant ground truth");
  q_mean = q_sum / static_cast<T>(n);
  T q_var = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    T d = q_flat[i] - q_mean;
    q_var += d * d;
  }
  T q_sd = std::sqrt(q_var / static_cast<T>(n));
  FBL_CHECK(q_sd > 0, Err::ConstMap, "saliency_loss: constant ground truth");

  const T eps = static_cast<T>(epsilon_kl);

  // KL term on normalized maps, with the regularizer inside and outside the
  // ratio: sum_i qn_i * log(eps + qn_i / (eps + pn_i)).
  Tensor<T> qn = q_flat;
  for (std::int64_t i = 0; i < n; ++i) qn[i] /= q_sum;
  Var<T> qn_c = make_var<T>(qn);
  Var<T> pn = div_bscalar(p_flat, sum_all(p_flat));
  Var<T> ratio = div(qn_c, add_scalar(pn, eps));
  Var<T> kl = sum_all(mul(qn_c, log_op(add_scalar(ratio, eps))));

  // NSS: z-score P, average at fixations.
  Var<T> p_mean = mean_all(p_flat);
  Var<T> centered = sub_bscalar(p_flat, p_mean);
  Var<T> p_sd = sqrt_op(mean_all(mul(centered, centered)));
  FBL_CHECK(p_sd->value[0] > 0, Err::ConstMap, "saliency_loss: constant prediction");
  Var<T> zs = div_bscalar(centered, p_sd);
  Var<T> nss_term = mean_all(gather_pixels(zs, fix_idx));

  // CC: Cov(P,Q) / (sd(P) sd(Q)).
  Tensor<T> qc = q_flat;
  for (std::int64_t i = 0; i < n; ++i) qc[i] -= q_mean;
  Var<T> cov = mean_all(mul(centered, make_var<T>(qc)));
  Var<T> cc_term = mul_scalar(div_bscalar(cov, p_sd), T(1) / q_sd);

  Var<T> loss = mul_scalar(kl, static_cast<T>(w.mu));
  loss = add(loss, mul_scalar(nss_term, -static_cast<T>(w.eta)));
  loss = add(loss, mul_scalar(cc_term, -static_cast<T>(w.xi)));
  return loss;
}

}  // namespace fblnet
