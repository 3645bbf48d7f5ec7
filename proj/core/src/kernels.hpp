#pragma once

#include <cstddef>

namespace bkd::kernels {

// c[m x p] += a[m x k] * b[k x p], all row-major. The i-k-j order keeps the
// per-element accumulation order fixed (k ascending) while letting the
// compiler vectorize across j.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    const double* arow = a + i * k;
    std::size_t t = 0;
    // Four k steps per pass over crow; the left-to-right sum keeps the same
    // rounding sequence as one step at a time.
    for (; t + 4 <= k; t += 4) {
      const double a0 = arow[t], a1 = arow[t + 1], a2 = arow[t + 2], a3 = arow[t + 3];
      const double* b0 = b + t * p;
      const double* b1 = b0 + p;
      const double* b2 = b1 + p;
      const double* b3 = b2 + p;
      for (std::size_t j = 0; j < p; ++j) crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; t < k; ++t) {
      const double av = arow[t];
      const double* brow = b + t * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// out[cols x rows] = in[rows x cols]^T
inline void transpose(const double* in, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

}  // namespace bkd::kernels
