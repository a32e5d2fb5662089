#pragma once

#include <cstdint>

namespace pfnlab {

// C (m x n, row-major) = alpha * op(A) * op(B), optionally accumulated into C.
// Reductions run in f64 with a fixed blocked order, then truncate to the
// storage type, so repeated runs produce bit-identical results.
void gemm_f64acc(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
                 const float* a, int64_t lda, const float* b, int64_t ldb, float* c, int64_t ldc,
                 bool accumulate);

void gemm_f64acc(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
                 const double* a, int64_t lda, const double* b, int64_t ldb, double* c, int64_t ldc,
                 bool accumulate);

}  // namespace pfnlab
