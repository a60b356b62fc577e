#include "blas.hpp"

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace pyrdet::detail {

namespace {
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

CBLAS_TRANSPOSE flag(bool t) { return t ? CblasTrans : CblasNoTrans; }
}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, flag(trans_a), flag(trans_b), m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, flag(trans_a), flag(trans_b), m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

}  // namespace pyrdet::detail
