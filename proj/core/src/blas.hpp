#pragma once

#include <cblas.h>

namespace msht::detail {

// Row-major C[M,N] = alpha * op(A)[M,K] * op(B)[K,N] + beta * C.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 const double* b, double beta, double* c) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
              trans_b ? k : n, beta, c, n);
}

}  // namespace msht::detail
