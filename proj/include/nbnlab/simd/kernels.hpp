#pragma once

// Dense double-precision kernels behind the tensor engine.
//
// Every kernel has a portable scalar reference implementation and, on x86-64
// hosts that report AVX2+FMA at runtime, a vectorized variant. The two are
// not bit-identical (FMA contracts rounding) but agree to a few ulps; the
// equivalence tests pin that tolerance. Within one process the selected table
// never changes, so training stays bit-reproducible run to run.

#include <cstddef>
#include <span>
#include <string_view>

namespace nbnlab::simd {

// All matrices are row-major. `accumulate` adds into C instead of overwriting.
//
//   gemm_nn: C[m x n] (+)= A[m x k]   * B[k x n]
//   gemm_nt: C[m x n] (+)= A[m x k]   * B[n x k]^T
//   gemm_tn: C[m x n] (+)= A[k x m]^T * B[k x n]
using GemmFn = void (*)(std::size_t m, std::size_t n, std::size_t k,
                        const double* a, const double* b, double* c,
                        bool accumulate);

// y += alpha * x
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x,
                        double* y);

using DotFn = double (*)(std::size_t n, const double* x, const double* y);

struct KernelTable {
  std::string_view name;
  GemmFn gemm_nn;
  GemmFn gemm_nt;
  GemmFn gemm_tn;
  AxpyFn axpy;
  DotFn dot;
};

const KernelTable& scalar_kernels();

// nullptr when the binary was built without the AVX2 translation unit or the
// host CPU lacks AVX2/FMA.
const KernelTable* avx2_kernels();

// The table used by the tensor engine. Chosen once on first use: AVX2 when
// available, otherwise scalar. NBNLAB_SIMD=scalar in the environment forces
// the reference kernels.
const KernelTable& active_kernels();

// Overrides the active table (tests and benchmarks). Not thread-safe with
// concurrent kernel use.
void set_active_kernels(const KernelTable& table);

namespace detail {
// Defined in kernels_avx2.cpp when compiled; returns nullptr otherwise.
const KernelTable* avx2_table_if_compiled();
}  // namespace detail

}  // namespace nbnlab::simd
