#pragma once

#include <cstdint>
#include <type_traits>

namespace fblnet {
namespace kernels {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, op(A) m×k, op(B) k×n.
// trans flags select op(X) = X ('n') or X^T ('t'). The 't','t' combination is
// served by the reference path only; no caller uses it on the hot path.

enum class Isa { scalar, avx2 };

bool avx2_supported();
Isa active_isa();
void force_isa(Isa isa);  // avx2 request silently degrades to scalar if unsupported
void reset_isa();         // back to auto-detect (honors FBLNET_ISA env var)

// ---- scalar reference, any arithmetic type ----

template <typename T>
void gemm_ref(char transA, char transB, int m, int n, int k, T alpha, const T* A, int lda,
              const T* B, int ldb, T beta, T* C, int ldc) {
  auto a_at = [&](int i, int p) { return transA == 'n' ? A[static_cast<std::int64_t>(i) * lda + p]
                                                       : A[static_cast<std::int64_t>(p) * lda + i]; };
  auto b_at = [&](int p, int j) { return transB == 'n' ? B[static_cast<std::int64_t>(p) * ldb + j]
                                                       : B[static_cast<std::int64_t>(j) * ldb + p]; };
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += a_at(i, p) * b_at(p, j);
      T* c = &C[static_cast<std::int64_t>(i) * ldc + j];
      *c = alpha * acc + (beta == T(0) ? T(0) : beta * *c);
    }
  }
}

template <typename T>
void add_ref(const T* a, const T* b, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
template <typename T>
void sub_ref(const T* a, const T* b, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}
template <typename T>
void mul_ref(const T* a, const T* b, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
template <typename T>
void axpy_ref(T a, const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}
template <typename T>
void scale_ref(T a, T* x, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) x[i] *= a;
}
template <typename T>
void relu_ref(const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}
// dx += dy where x > 0
template <typename T>
void relu_bwd_ref(const T* x, const T* dy, T* dx, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i)
    if (x[i] > T(0)) dx[i] += dy[i];
}
template <typename T>
T sum_ref(const T* x, std::int64_t n) {
  T s = T(0);
  for (std::int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}
template <typename T>
T dot_ref(const T* a, const T* b, std::int64_t n) {
  T s = T(0);
  for (std::int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// ---- dispatched float entry points ----

void gemm(char transA, char transB, int m, int n, int k, float alpha, const float* A, int lda,
          const float* B, int ldb, float beta, float* C, int ldc);
void add(const float* a, const float* b, float* y, std::int64_t n);
void sub(const float* a, const float* b, float* y, std::int64_t n);
void mul(const float* a, const float* b, float* y, std::int64_t n);
void axpy(float a, const float* x, float* y, std::int64_t n);
void scale(float a, float* x, std::int64_t n);
void relu(const float* x, float* y, std::int64_t n);
void relu_bwd(const float* x, const float* dy, float* dx, std::int64_t n);
float sum(const float* x, std::int64_t n);
float dot(const float* a, const float* b, std::int64_t n);

// ---- generic front door used by the templated tensor ops ----

template <typename T>
void gemm_t(char ta, char tb, int m, int n, int k, T alpha, const T* A, int lda, const T* B,
            int ldb, T beta, T* C, int ldc) {
  if constexpr (std::is_same_v<T, float>)
    gemm(ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
  else
    gemm_ref(ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
}
template <typename T>
void add_t(const T* a, const T* b, T* y, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) add(a, b, y, n);
  else add_ref(a, b, y, n);
}
template <typename T>
void sub_t(const T* a, const T* b, T* y, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) sub(a, b, y, n);
  else sub_ref(a, b, y, n);
}
template <typename T>
void mul_t(const T* a, const T* b, T* y, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) mul(a, b, y, n);
  else mul_ref(a, b, y, n);
}
template <typename T>
void axpy_t(T a, const T* x, T* y, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) axpy(a, x, y, n);
  else axpy_ref(a, x, y, n);
}
template <typename T>
void scale_t(T a, T* x, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) scale(a, x, n);
  else scale_ref(a, x, n);
}
template <typename T>
void relu_t(const T* x, T* y, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) relu(x, y, n);
  else relu_ref(x, y, n);
}
template <typename T>
void relu_bwd_t(const T* x, const T* dy, T* dx, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) relu_bwd(x, dy, dx, n);
  else relu_bwd_ref(x, dy, dx, n);
}
template <typename T>
T sum_t(const T* x, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) return sum(x, n);
  else return sum_ref(x, n);
}
template <typename T>
T dot_t(const T* a, const T* b, std::int64_t n) {
  if constexpr (std::is_same_v<T, float>) return dot(a, b, n);
  else return dot_ref(a, b, n);
}

}  // namespace kernels
}  // namespace fblnet
