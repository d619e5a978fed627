#include "fblnet/kernels.hpp"

#include "kernels_table.hpp"

namespace fblnet {
namespace kernels {

namespace {

void gemm_scalar(char ta, char tb, int m, int n, int k, float alpha, const float* A, int lda,
                 const float* B, int ldb, float beta, float* C, int ldc) {
  gemm_ref<float>(ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
}
void add_scalar(const float* a, const float* b, float* y, std::int64_t n) { add_ref(a, b, y, n); }
void sub_scalar(const float* a, const float* b, float* y, std::int64_t n) { sub_ref(a, b, y, n); }
void mul_scalar(const float* a, const float* b, float* y, std::int64_t n) { mul_ref(a, b, y, n); }
void axpy_scalar(float a, const float* x, float* y, std::int64_t n) { axpy_ref(a, x, y, n); }
void scale_scalar(float a, float* x, std::int64_t n) { scale_ref(a, x, n); }
void relu_scalar(const float* x, float* y, std::int64_t n) { relu_ref(x, y, n); }
void relu_bwd_scalar(const float* x, const float* dy, float* dx, std::int64_t n) {
  relu_bwd_ref(x, dy, dx, n);
}
float sum_scalar(const float* x, std::int64_t n) { return sum_ref(x, n); }
float dot_scalar(const float* a, const float* b, std::int64_t n) { return dot_ref(a, b, n); }

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable t = {
      gemm_scalar, add_scalar,  sub_scalar,      mul_scalar, axpy_scalar,
      scale_scalar, relu_scalar, relu_bwd_scalar, sum_scalar, dot_scalar,
  };
  return t;
}

}  // namespace kernels
}  // namespace fblnet
