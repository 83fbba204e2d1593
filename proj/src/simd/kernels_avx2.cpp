// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma and
// must only be entered after a runtime CPU check (see dispatch.cpp).

#include "nbnlab/simd/kernels.hpp"

#if defined(NBNLAB_HAVE_AVX2) && (defined(__x86_64__) || defined(_M_X64))

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace nbnlab::simd {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

// R rows of C times an 8-wide column panel. A(i, p) = a[i * row_stride + p *
// col_stride], which covers both the plain and the transposed left operand.
template <std::size_t R>
inline void panel8(std::size_t n, std::size_t k, const double* a,
                   std::size_t row_stride, std::size_t col_stride,
                   const double* b, double* c, bool accumulate) {
  __m256d acc[R][2];
  for (std::size_t r = 0; r < R; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_loadu_pd(c + r * n);
      acc[r][1] = _mm256_loadu_pd(c + r * n + 4);
    } else {
      acc[r][0] = _mm256_setzero_pd();
      acc[r][1] = _mm256_setzero_pd();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + 4);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(a + r * row_stride + p * col_stride);
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + r * n, acc[r][0]);
    _mm256_storeu_pd(c + r * n + 4, acc[r][1]);
  }
}

template <std::size_t R>
inline void panel4(std::size_t n, std::size_t k, const double* a,
                   std::size_t row_stride, std::size_t col_stride,
                   const double* b, double* c, bool accumulate) {
  __m256d acc[R];
  for (std::size_t r = 0; r < R; ++r)
    acc[r] = accumulate ? _mm256_loadu_pd(c + r * n) : _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256d av = _mm256_broadcast_sd(a + r * row_stride + p * col_stride);
      acc[r] = _mm256_fmadd_pd(av, b0, acc[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) _mm256_storeu_pd(c + r * n, acc[r]);
}

template <std::size_t R>
inline void panel1(std::size_t n, std::size_t k, const double* a,
                   std::size_t row_stride, std::size_t col_stride,
                   const double* b, double* c, bool accumulate) {
  for (std::size_t r = 0; r < R; ++r) {
    double s = accumulate ? c[r * n] : 0.0;
    for (std::size_t p = 0; p < k; ++p)
      s = std::fma(a[r * row_stride + p * col_stride], b[p * n], s);
    c[r * n] = s;
  }
}

template <std::size_t R>
inline void row_block(std::size_t n, std::size_t k, const double* a,
                      std::size_t row_stride, std::size_t col_stride,
                      const double* b, double* c, bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    panel8<R>(n, k, a, row_stride, col_stride, b + j, c + j, accumulate);
  for (; j + 4 <= n; j += 4)
    panel4<R>(n, k, a, row_stride, col_stride, b + j, c + j, accumulate);
  for (; j < n; ++j)
    panel1<R>(n, k, a, row_stride, col_stride, b + j, c + j, accumulate);
}

void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  std::size_t row_stride, std::size_t col_stride,
                  const double* b, double* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4)
    row_block<4>(n, k, a + i * row_stride, row_stride, col_stride, b,
                 c + i * n, accumulate);
  for (; i < m; ++i)
    row_block<1>(n, k, a + i * row_stride, row_stride, col_stride, b,
                 c + i * n, accumulate);
}

void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k,
                  const double* a, const double* b, double* c,
                  bool accumulate) {
  gemm_strided(m, n, k, a, k, 1, b, c, accumulate);
}

void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k,
                  const double* a, const double* b, double* c,
                  bool accumulate) {
  gemm_strided(m, n, k, a, 1, m, b, c, accumulate);
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4),
                         _mm256_loadu_pd(y + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4)
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s = std::fma(x[i], y[i], s);
  return s;
}

// Each output is a dot product of two contiguous rows; four B rows are
// processed together so every A load is reused.
void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k,
                  const double* a, const double* b, double* c,
                  bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s0 = _mm256_setzero_pd();
      __m256d s1 = _mm256_setzero_pd();
      __m256d s2 = _mm256_setzero_pd();
      __m256d s3 = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        const __m256d av = _mm256_loadu_pd(arow + p);
        s0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), s3);
      }
      double r0 = hsum(s0), r1 = hsum(s1), r2 = hsum(s2), r3 = hsum(s3);
      for (; p < k; ++p) {
        r0 = std::fma(arow[p], b0[p], r0);
        r1 = std::fma(arow[p], b1[p], r1);
        r2 = std::fma(arow[p], b2[p], r2);
        r3 = std::fma(arow[p], b3[p], r3);
      }
      if (accumulate) {
        crow[j] += r0;
        crow[j + 1] += r1;
        crow[j + 2] += r2;
        crow[j + 3] += r3;
      } else {
        crow[j] = r0;
        crow[j + 1] = r1;
        crow[j + 2] = r2;
        crow[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const double s = dot_avx2(k, arow, b + j * k);
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i),
                                            _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

}  // namespace

namespace detail {
const KernelTable* avx2_table_if_compiled() {
  static const KernelTable table{"avx2", gemm_nn_avx2, gemm_nt_avx2,
                                 gemm_tn_avx2, axpy_avx2, dot_avx2};
  return &table;
}
}  // namespace detail

}  // namespace nbnlab::simd

#else

namespace nbnlab::simd::detail {
const KernelTable* avx2_table_if_compiled() { return nullptr; }
}  // namespace nbnlab::simd::detail

#endif
