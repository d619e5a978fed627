#pragma once

#include <cstdint>

namespace fblnet {
namespace kernels {

struct KernelTable {
  void (*gemm)(char, char, int, int, int, float, const float*, int, const float*, int, float,
               float*, int);
  void (*add)(const float*, const float*, float*, std::int64_t);
  void (*sub)(const float*, const float*, float*, std::int64_t);
  void (*mul)(const float*, const float*, float*, std::int64_t);
  void (*axpy)(float, const float*, float*, std::int64_t);
  void (*scale)(float, float*, std::int64_t);
  void (*relu)(const float*, float*, std::int64_t);
  void (*relu_bwd)(const float*, const float*, float*, std::int64_t);
  float (*sum)(const float*, std::int64_t);
  float (*dot)(const float*, const float*, std::int64_t);
};

const KernelTable& scalar_table();
const KernelTable* avx2_table();  // nullptr when the build or CPU lacks AVX2

}  // namespace kernels
}  // namespace fblnet
