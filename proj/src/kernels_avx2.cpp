#include "fblnet/kernels.hpp"

#include "kernels_table.hpp"

#if defined(__x86_64__) || defined(__i386__)

#include <immintrin.h>

#define FBL_AVX2 __attribute__((target("avx2,fma")))

namespace fblnet {
namespace kernels {
namespace {

// Cache blocking: a KC×NC panel of B stays in L2 while MR-row strips of A
// sweep it. The micro-tile is MR rows × 16 columns (two ymm accumulators per
// row).
constexpr int KC = 160;
constexpr int NC = 1024;
constexpr int MR = 4;

FBL_AVX2 inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

FBL_AVX2 void scale_rows(float beta, int m, int n, float* C, int ldc) {
  for (int i = 0; i < m; ++i) {
    float* c = C + static_cast<std::int64_t>(i) * ldc;
    if (beta == 0.0f) {
      std::int64_t j = 0;
      __m256 z = _mm256_setzero_ps();
      for (; j + 8 <= n; j += 8) _mm256_storeu_ps(c + j, z);
      for (; j < n; ++j) c[j] = 0.0f;
    } else if (beta != 1.0f) {
      __m256 b = _mm256_set1_ps(beta);
      std::int64_t j = 0;
      for (; j + 8 <= n; j += 8) _mm256_storeu_ps(c + j, _mm256_mul_ps(b, _mm256_loadu_ps(c + j)));
      for (; j < n; ++j) c[j] *= beta;
    }
  }
}

// C[i0..i0+rows) += alpha * A-strip * B-panel over kk in [pc, pc+kb), columns
// [jc, jc+nb). a_fetch abstracts the A layout so the same tile serves the
// 'n'/'t' transA cases.
template <bool TransA>
FBL_AVX2 void accum_panel(int rows, int i0, int jc, int nb, int pc, int kb, float alpha,
                          const float* A, int lda, const float* B, int ldb, float* C, int ldc) {
  auto a_val = [&](int r, int kk) -> float {
    return TransA ? A[static_cast<std::int64_t>(kk) * lda + (i0 + r)]
                  : A[static_cast<std::int64_t>(i0 + r) * lda + kk];
  };
  int j = jc;
  for (; j + 16 <= jc + nb; j += 16) {
    __m256 acc[MR][2];
    for (int r = 0; r < rows; ++r) {
      acc[r][0] = _mm256_loadu_ps(C + static_cast<std::int64_t>(i0 + r) * ldc + j);
      acc[r][1] = _mm256_loadu_ps(C + static_cast<std::int64_t>(i0 + r) * ldc + j + 8);
    }
    for (int kk = pc; kk < pc + kb; ++kk) {
      __m256 b0 = _mm256_loadu_ps(B + static_cast<std::int64_t>(kk) * ldb + j);
      __m256 b1 = _mm256_loadu_ps(B + static_cast<std::int64_t>(kk) * ldb + j + 8);
      for (int r = 0; r < rows; ++r) {
        __m256 a = _mm256_set1_ps(alpha * a_val(r, kk));
        acc[r][0] = _mm256_fmadd_ps(a, b0, acc[r][0]);
        acc[r][1] = _mm256_fmadd_ps(a, b1, acc[r][1]);
      }
    }
    for (int r = 0; r < rows; ++r) {
      _mm256_storeu_ps(C + static_cast<std::int64_t>(i0 + r) * ldc + j, acc[r][0]);
      _mm256_storeu_ps(C + static_cast<std::int64_t>(i0 + r) * ldc + j + 8, acc[r][1]);
    }
  }
  for (; j < jc + nb; ++j) {
    for (int r = 0; r < rows; ++r) {
      float acc = 0.0f;
      for (int kk = pc; kk < pc + kb; ++kk)
        acc += a_val(r, kk) * B[static_cast<std::int64_t>(kk) * ldb + j];
      C[static_cast<std::int64_t>(i0 + r) * ldc + j] += alpha * acc;
    }
  }
}

template <bool TransA>
FBL_AVX2 void gemm_bcast(int m, int n, int k, float alpha, const float* A, int lda, const float* B,
                         int ldb, float* C, int ldc) {
  for (int jc = 0; jc < n; jc += NC) {
    int nb = n - jc < NC ? n - jc : NC;
    for (int pc = 0; pc < k; pc += KC) {
      int kb = k - pc < KC ? k - pc : KC;
      int i0 = 0;
      for (; i0 + MR <= m; i0 += MR)
        accum_panel<TransA>(MR, i0, jc, nb, pc, kb, alpha, A, lda, B, ldb, C, ldc);
      if (i0 < m) accum_panel<TransA>(m - i0, i0, jc, nb, pc, kb, alpha, A, lda, B, ldb, C, ldc);
    }
  }
}

// C = alpha*A*B^T + C, dot-product form; B row panels blocked to stay cached.
FBL_AVX2 void gemm_nt_accum(int m, int n, int k, float alpha, const float* A, int lda,
                            const float* B, int ldb, float* C, int ldc) {
  constexpr int JB = 128;
  for (int jc = 0; jc < n; jc += JB) {
    int nb = n - jc < JB ? n - jc : JB;
    for (int i = 0; i < m; ++i) {
      const float* a = A + static_cast<std::int64_t>(i) * lda;
      int j = jc;
      for (; j + 4 <= jc + nb; j += 4) {
        const float* b0 = B + static_cast<std::int64_t>(j) * ldb;
        const float* b1 = b0 + ldb;
        const float* b2 = b1 + ldb;
        const float* b3 = b2 + ldb;
        __m256 s0 = _mm256_setzero_ps(), s1 = s0, s2 = s0, s3 = s0;
        int kk = 0;
        for (; kk + 8 <= k; kk += 8) {
          __m256 av = _mm256_loadu_ps(a + kk);
          s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b0 + kk), s0);
          s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b1 + kk), s1);
          s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b2 + kk), s2);
          s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b3 + kk), s3);
        }
        float d0 = hsum(s0), d1 = hsum(s1), d2 = hsum(s2), d3 = hsum(s3);
        for (; kk < k; ++kk) {
          d0 += a[kk] * b0[kk];
          d1 += a[kk] * b1[kk];
          d2 += a[kk] * b2[kk];
          d3 += a[kk] * b3[kk];
        }
        float* c = C + static_cast<std::int64_t>(i) * ldc + j;
        c[0] += alpha * d0;
        c[1] += alpha * d1;
        c[2] += alpha * d2;
        c[3] += alpha * d3;
      }
      for (; j < jc + nb; ++j) {
        const float* b = B + static_cast<std::int64_t>(j) * ldb;
        __m256 s = _mm256_setzero_ps();
        int kk = 0;
        for (; kk + 8 <= k; kk += 8)
          s = _mm256_fmadd_ps(_mm256_loadu_ps(a + kk), _mm256_loadu_ps(b + kk), s);
        float d = hsum(s);
        for (; kk < k; ++kk) d += a[kk] * b[kk];
        C[static_cast<std::int64_t>(i) * ldc + j] += alpha * d;
      }
    }
  }
}

FBL_AVX2 void gemm_avx2(char ta, char tb, int m, int n, int k, float alpha, const float* A,
                        int lda, const float* B, int ldb, float beta, float* C, int ldc) {
  if (ta == 't' && tb == 't') {
    gemm_ref<float>(ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
    return;
  }
  scale_rows(beta, m, n, C, ldc);
  if (alpha == 0.0f || k == 0) return;
  if (ta == 'n' && tb == 'n')
    gemm_bcast<false>(m, n, k, alpha, A, lda, B, ldb, C, ldc);
  else if (ta == 't' && tb == 'n')
    gemm_bcast<true>(m, n, k, alpha, A, lda, B, ldb, C, ldc);
  else
    gemm_nt_accum(m, n, k, alpha, A, lda, B, ldb, C, ldc);
}

FBL_AVX2 void add_avx2(const float* a, const float* b, float* y, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

FBL_AVX2 void sub_avx2(const float* a, const float* b, float* y, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

FBL_AVX2 void mul_avx2(const float* a, const float* b, float* y, std::int64_t n) {
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

FBL_AVX2 void axpy_avx2(float a, const float* x, float* y, std::int64_t n) {
  __m256 av = _mm256_set1_ps(a);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

FBL_AVX2 void scale_avx2(float a, float* x, std::int64_t n) {
  __m256 av = _mm256_set1_ps(a);
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= a;
}

FBL_AVX2 void relu_avx2(const float* x, float* y, std::int64_t n) {
  __m256 z = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_max_ps(z, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

FBL_AVX2 void relu_bwd_avx2(const float* x, const float* dy, float* dx, std::int64_t n) {
  __m256 z = _mm256_setzero_ps();
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), z, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(mask, _mm256_loadu_ps(dy + i));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), g));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f) dx[i] += dy[i];
}

FBL_AVX2 float sum_avx2(const float* x, std::int64_t n) {
  __m256 s0 = _mm256_setzero_ps(), s1 = s0, s2 = s0, s3 = s0;
  std::int64_t i = 0;
  for (; i + 32 <= n; i += 32) {
    s0 = _mm256_add_ps(s0, _mm256_loadu_ps(x + i));
    s1 = _mm256_add_ps(s1, _mm256_loadu_ps(x + i + 8));
    s2 = _mm256_add_ps(s2, _mm256_loadu_ps(x + i + 16));
    s3 = _mm256_add_ps(s3, _mm256_loadu_ps(x + i + 24));
  }
  for (; i + 8 <= n; i += 8) s0 = _mm256_add_ps(s0, _mm256_loadu_ps(x + i));
  float s = hsum(_mm256_add_ps(_mm256_add_ps(s0, s1), _mm256_add_ps(s2, s3)));
  for (; i < n; ++i) s += x[i];
  return s;
}

FBL_AVX2 float dot_avx2(const float* a, const float* b, std::int64_t n) {
  __m256 s0 = _mm256_setzero_ps(), s1 = s0;
  std::int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
    s1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), s1);
  }
  for (; i + 8 <= n; i += 8) s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
  float s = hsum(_mm256_add_ps(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

bool avx2_supported() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

const KernelTable* avx2_table() {
  if (!avx2_supported()) return nullptr;
  static const KernelTable t = {
      gemm_avx2, add_avx2,  sub_avx2,      mul_avx2, axpy_avx2,
      scale_avx2, relu_avx2, relu_bwd_avx2, sum_avx2, dot_avx2,
  };
  return &t;
}

}  // namespace kernels
}  // namespace fblnet

#else  // non-x86 build: no AVX2 variant

namespace fblnet {
namespace kernels {
bool avx2_supported() { return false; }
const KernelTable* avx2_table() { return nullptr; }
}  // namespace kernels
}  // namespace fblnet

#endif
