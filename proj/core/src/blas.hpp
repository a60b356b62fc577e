#pragma once

// Thin row-major GEMM wrapper over OpenBLAS. BLAS internal threading is
// pinned to one thread; parallelism lives in the callers (batch loops),
// which keeps results bitwise reproducible for a fixed configuration.

namespace pyrdet::detail {

// C = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          int lda, const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace pyrdet::detail
