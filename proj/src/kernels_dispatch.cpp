#include <atomic>
#include <cstdlib>
#include <cstring>

#include "fblnet/kernels.hpp"
#include "kernels_table.hpp"

namespace fblnet {
namespace kernels {

namespace {

std::atomic<const KernelTable*> g_table{nullptr};
std::atomic<Isa> g_isa{Isa::scalar};

const KernelTable* resolve() {
  const KernelTable* t = g_table.load(std::memory_order_acquire);
  if (t) return t;
  Isa isa = Isa::scalar;
  const char* env = std::getenv("FBLNET_ISA");
  if (env && std::strcmp(env, "scalar") == 0) {
    isa = Isa::scalar;
  } else if (avx2_supported() && (!env || std::strcmp(env, "avx2") == 0)) {
    isa = Isa::avx2;
  }
  const KernelTable* chosen = isa == Isa::avx2 ? avx2_table() : &scalar_table();
  if (!chosen) {
    chosen = &scalar_table();
    isa = Isa::scalar;
  }
  g_isa.store(isa, std::memory_order_relaxed);
  g_table.store(chosen, std::memory_order_release);
  return chosen;
}

}  // namespace

Isa active_isa() {
  resolve();
  return g_isa.load(std::memory_order_relaxed);
}

void force_isa(Isa isa) {
  if (isa == Isa::avx2 && avx2_table()) {
    g_isa.store(Isa::avx2);
    g_table.store(avx2_table());
  } else {
    g_isa.store(Isa::scalar);
    g_table.store(&scalar_table());
  }
}

void reset_isa() { g_table.store(nullptr); }

void gemm(char ta, char tb, int m, int n, int k, float alpha, const float* A, int lda,
          const float* B, int ldb, float beta, float* C, int ldc) {
  resolve()->gemm(ta, tb, m, n, k, alpha, A, lda, B, ldb, beta, C, ldc);
}
void add(const float* a, const float* b, float* y, std::int64_t n) { resolve()->add(a, b, y, n); }
void sub(const float* a, const float* b, float* y, std::int64_t n) { resolve()->sub(a, b, y, n); }
void mul(const float* a, const float* b, float* y, std::int64_t n) { resolve()->mul(a, b, y, n); }
void axpy(float a, const float* x, float* y, std::int64_t n) { resolve()->axpy(a, x, y, n); }
void scale(float a, float* x, std::int64_t n) { resolve()->scale(a, x, n); }
void relu(const float* x, float* y, std::int64_t n) { resolve()->relu(x, y, n); }
void relu_bwd(const float* x, const float* dy, float* dx, std::int64_t n) {
  resolve()->relu_bwd(x, dy, dx, n);
}
float sum(const float* x, std::int64_t n) { return resolve()->sum(x, n); }
float dot(const float* a, const float* b, std::int64_t n) { return resolve()->dot(a, b, n); }

}  // namespace kernels
}  // namespace fblnet
