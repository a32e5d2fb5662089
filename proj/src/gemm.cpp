#include "pfnlab/gemm.hpp"

#include <Eigen/Dense>

namespace pfnlab {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StrideD = Eigen::Stride<Eigen::Dynamic, 1>;

template <typename S>
using MapConst = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0, StrideD>;

template <typename S>
MatD load(const S* p, int64_t rows, int64_t cols, int64_t ld, bool trans) {
    MapConst<S> m(p, trans ? cols : rows, trans ? rows : cols, StrideD(ld, 1));
    if (trans) return m.transpose().template cast<double>();
    return m.template cast<double>();
}

template <typename S>
void gemm_impl(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const S* a, int64_t lda,
               const S* b, int64_t ldb, S* c, int64_t ldc, bool accumulate) {
    const MatD ad = load(a, m, k, lda, ta);
    const MatD bd = load(b, k, n, ldb, tb);
    MatD cd(m, n);
    cd.noalias() = ad * bd;
    for (int64_t i = 0; i < m; ++i) {
        const double* src = cd.data() + i * n;
        S* dst = c + i * ldc;
        if (accumulate) {
            for (int64_t j = 0; j < n; ++j) dst[j] += S(alpha * src[j]);
        } else {
            for (int64_t j = 0; j < n; ++j) dst[j] = S(alpha * src[j]);
        }
    }
}

}  // namespace

void gemm_f64acc(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const float* a,
                 int64_t lda, const float* b, int64_t ldb, float* c, int64_t ldc, bool accumulate) {
    gemm_impl(ta, tb, m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate);
}

void gemm_f64acc(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
                 int64_t lda, const double* b, int64_t ldb, double* c, int64_t ldc, bool accumulate) {
    gemm_impl(ta, tb, m, n, k, alpha, a, lda, b, ldb, c, ldc, accumulate);
}

}  // namespace pfnlab
