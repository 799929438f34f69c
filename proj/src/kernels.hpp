#pragma once

// Dense kernels shared by the matmul and conv2d ops. Row-major, accumulate
// into the output (callers zero it when they want a plain product).

#include <cstddef>

namespace cpmlho::kernels {

/// C[m x p] += A[m x k] * B[k x p]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * p;
    double* c1 = c0 + p;
    double* c2 = c1 + p;
    double* c3 = c2 + p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double a0 = a[i * k + kk];
      const double a1 = a[(i + 1) * k + kk];
      const double a2 = a[(i + 2) * k + kk];
      const double a3 = a[(i + 3) * k + kk];
      const double* br = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) {
        const double bv = br[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[i * k + kk];
      const double* br = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * br[j];
    }
  }
}

/// C[k x p] += A[m x k]^T * B[m x p]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    const double* br = b + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ar[kk];
      if (av == 0.0) continue;
      double* cr = c + kk * p;
      for (std::size_t j = 0; j < p; ++j) cr[j] += av * br[j];
    }
  }
}

/// out[cols x rows] = in[rows x cols]^T
inline void transpose(const double* in, double* out, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = r0 + kBlock < rows ? r0 + kBlock : rows;
      const std::size_t c1 = c0 + kBlock < cols ? c0 + kBlock : cols;
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
      }
    }
  }
}

}  // namespace cpmlho::kernels
