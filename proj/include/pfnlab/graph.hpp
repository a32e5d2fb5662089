#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "pfnlab/common.hpp"
#include "pfnlab/gemm.hpp"
#include "pfnlab/param_store.hpp"
#include "pfnlab/rng.hpp"
#include "pfnlab/tensor.hpp"

namespace pfnlab {

// Reverse-mode tape. Ops evaluate eagerly; backward() replays recorded
// closures in exact reverse insertion order, so gradient accumulation order
// is fixed and results are reproducible bit-for-bit.
//
// Instantiated with T=float for the normal path and T=double for gradient
// checking.
template <typename T>
class GraphT {
public:
    struct Node {
        TensorT<T> val;
        TensorT<T> grad;  // allocated on first contribution
        bool needs_grad = false;
        std::function<void(GraphT&, int)> bwd;
        std::string param_name;  // non-empty for store-bound leaves
    };

    int input(TensorT<T> v, bool needs_grad = false) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    // Leaf bound to a store entry; repeated binds return the same node so
    // gradients from multiple uses accumulate in one place.
    int param(const ParamStoreT<T>& store, const std::string& name) {
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return it->second;
        const auto& e = store.at(name);
        const int id = input(e.tensor, e.trainable);
        nodes_[size_t(id)].param_name = name;
        param_nodes_[name] = id;
        return id;
    }

    const TensorT<T>& value(int id) const { return nodes_[size_t(id)].val; }
    T scalar_value(int id) const {
        check_shape(nodes_[size_t(id)].val.numel() == 1, "scalar_value on non-scalar node");
        return nodes_[size_t(id)].val.at(0);
    }
    const TensorT<T>& grad(int id) const { return nodes_[size_t(id)].grad; }
    size_t node_count() const { return nodes_.size(); }

    // ---- ops ----

    // C = alpha * op(A) * op(B) for rank-2 tensors.
    int matmul(int a, int b, bool ta = false, bool tb = false, double alpha = 1.0) {
        const TensorT<T>& A = val_(a);
        const TensorT<T>& B = val_(b);
        check_shape(A.rank() == 2 && B.rank() == 2, "matmul expects rank-2 tensors");
        const int64_t m = ta ? A.cols() : A.rows();
        const int64_t ka = ta ? A.rows() : A.cols();
        const int64_t kb = tb ? B.cols() : B.rows();
        const int64_t n = tb ? B.rows() : B.cols();
        check_shape(ka == kb, "matmul inner dimension mismatch: " + A.shape_str() + " x " + B.shape_str());
        TensorT<T> out({m, n});
        gemm_f64acc(ta, tb, m, n, ka, alpha, A.data.data(), A.cols(), B.data.data(), B.cols(),
                    out.data.data(), n, false);
        const int id = make_node_(std::move(out), needs_(a) || needs_(b));
        nodes_[size_t(id)].bwd = [a, b, ta, tb, alpha, m, n, ka](GraphT& g, int self) {
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            const TensorT<T>& A2 = g.val_(a);
            const TensorT<T>& B2 = g.val_(b);
            if (g.needs_(a)) {
                TensorT<T>& dA = g.ensure_grad_(a);
                if (!ta) {
                    // dA(m,ka) = dC(m,n) * op(B)^T(n,ka)
                    gemm_f64acc(false, !tb, m, ka, n, alpha, dC.data.data(), n, B2.data.data(), B2.cols(),
                                dA.data.data(), dA.cols(), true);
                } else {
                    // dA(ka,m) = op(B)(ka,n) * dC^T(n,m)
                    gemm_f64acc(tb, true, ka, m, n, alpha, B2.data.data(), B2.cols(), dC.data.data(), n,
                                dA.data.data(), dA.cols(), true);
                }
            }
            if (g.needs_(b)) {
                TensorT<T>& dB = g.ensure_grad_(b);
                if (!tb) {
                    // dB(ka,n) = op(A)^T(ka,m) * dC(m,n)
                    gemm_f64acc(!ta, false, ka, n, m, alpha, A2.data.data(), A2.cols(), dC.data.data(), n,
                                dB.data.data(), dB.cols(), true);
                } else {
                    // dB(n,ka) = dC^T(n,m) * op(A)(m,ka)
                    gemm_f64acc(true, ta, n, ka, m, alpha, dC.data.data(), n, A2.data.data(), A2.cols(),
                                dB.data.data(), dB.cols(), true);
                }
            }
        };
        return id;
    }

    int add(int a, int b) {
        const TensorT<T>& A = val_(a);
        const TensorT<T>& B = val_(b);
        check_shape(A.same_shape(B), "add shape mismatch");
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += B.at(i);
        const int id = make_node_(std::move(out), needs_(a) || needs_(b));
        nodes_[size_t(id)].bwd = [a, b](GraphT& g, int self) {
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            if (g.needs_(a)) g.accumulate_(a, dC);
            if (g.needs_(b)) g.accumulate_(b, dC);
        };
        return id;
    }

    // A (m x n) + row vector v (n), broadcast over rows.
    int add_rowvec(int a, int v) {
        const TensorT<T>& A = val_(a);
        const TensorT<T>& V = val_(v);
        check_shape(A.rank() == 2 && V.rank() == 1 && V.dim(0) == A.cols(), "add_rowvec shape mismatch");
        TensorT<T> out = A;
        for (int64_t i = 0; i < A.rows(); ++i)
            for (int64_t j = 0; j < A.cols(); ++j) out.at(i, j) += V.at(j);
        const int id = make_node_(std::move(out), needs_(a) || needs_(v));
        nodes_[size_t(id)].bwd = [a, v](GraphT& g, int self) {
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            if (g.needs_(a)) g.accumulate_(a, dC);
            if (g.needs_(v)) {
                TensorT<T>& dV = g.ensure_grad_(v);
                for (int64_t j = 0; j < dC.cols(); ++j) {
                    double s = 0.0;
                    for (int64_t i = 0; i < dC.rows(); ++i) s += double(dC.at(i, j));
                    dV.at(j) += T(s);
                }
            }
        };
        return id;
    }

    // y = s * x + t, elementwise with scalar constants.
    int affine(int a, double s, double t) {
        const TensorT<T>& A = val_(a);
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = T(s * double(out.at(i)) + t);
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a, s](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dC.numel(); ++i) dA.at(i) += T(s * double(dC.at(i)));
        };
        return id;
    }

    int scale(int a, double s) { return affine(a, s, 0.0); }

    int mul(int a, int b) {
        const TensorT<T>& A = val_(a);
        const TensorT<T>& B = val_(b);
        check_shape(A.same_shape(B), "mul shape mismatch");
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= B.at(i);
        const int id = make_node_(std::move(out), needs_(a) || needs_(b));
        nodes_[size_t(id)].bwd = [a, b](GraphT& g, int self) {
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            if (g.needs_(a)) {
                TensorT<T>& dA = g.ensure_grad_(a);
                const TensorT<T>& B2 = g.val_(b);
                for (int64_t i = 0; i < dC.numel(); ++i) dA.at(i) += dC.at(i) * B2.at(i);
            }
            if (g.needs_(b)) {
                TensorT<T>& dB = g.ensure_grad_(b);
                const TensorT<T>& A2 = g.val_(a);
                for (int64_t i = 0; i < dC.numel(); ++i) dB.at(i) += dC.at(i) * A2.at(i);
            }
        };
        return id;
    }

    int gelu(int a) {
        const TensorT<T>& A = val_(a);
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) {
            const double x = double(A.at(i));
            out.at(i) = T(0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)));
        }
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            const TensorT<T>& A2 = g.val_(a);
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dC.numel(); ++i) {
                const double x = double(A2.at(i));
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
                dA.at(i) += T(double(dC.at(i)) * (cdf + x * pdf));
            }
        };
        return id;
    }

    int relu(int a) {
        const TensorT<T>& A = val_(a);
        TensorT<T> out = A;
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = std::max(T(0), out.at(i));
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            const TensorT<T>& A2 = g.val_(a);
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dC.numel(); ++i)
                if (A2.at(i) > T(0)) dA.at(i) += dC.at(i);
        };
        return id;
    }

    // Normalizes the last axis to mean 0 / variance 1 (stats accumulated in
    // f64), then applies the gamma/beta affine.
    int layer_norm(int x, int gamma, int beta, double eps) {
        const TensorT<T>& X = val_(x);
        const TensorT<T>& G = val_(gamma);
        const TensorT<T>& Bt = val_(beta);
        check_shape(X.rank() >= 1, "layer_norm needs rank >= 1");
        const int64_t n = X.shape.back();
        check_shape(G.rank() == 1 && G.dim(0) == n && Bt.rank() == 1 && Bt.dim(0) == n,
                    "layer_norm gamma/beta must match last axis");
        const int64_t rows = n == 0 ? 0 : X.numel() / n;
        TensorT<T> out(X.shape);
        std::vector<T> xhat(static_cast<size_t>(X.numel()));
        std::vector<double> inv_std(static_cast<size_t>(rows));
        for (int64_t r = 0; r < rows; ++r) {
            const T* xs = X.data.data() + r * n;
            double mean = 0.0;
            for (int64_t j = 0; j < n; ++j) mean += double(xs[j]);
            mean /= double(n);
            double var = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double d = double(xs[j]) - mean;
                var += d * d;
            }
            var /= double(n);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std[size_t(r)] = inv;
            for (int64_t j = 0; j < n; ++j) {
                const T xh = T((double(xs[j]) - mean) * inv);
                xhat[size_t(r * n + j)] = xh;
                out.data[size_t(r * n + j)] = T(double(G.at(j)) * double(xh) + double(Bt.at(j)));
            }
        }
        const int id = make_node_(std::move(out), needs_(x) || needs_(gamma) || needs_(beta));
        nodes_[size_t(id)].bwd = [x, gamma, beta, n, rows, xhat = std::move(xhat),
                                  inv_std = std::move(inv_std)](GraphT& g, int self) {
            const TensorT<T>& dY = g.nodes_[size_t(self)].grad;
            const TensorT<T>& G2 = g.val_(gamma);
            if (g.needs_(gamma)) {
                TensorT<T>& dG = g.ensure_grad_(gamma);
                for (int64_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int64_t r = 0; r < rows; ++r)
                        s += double(dY.data[size_t(r * n + j)]) * double(xhat[size_t(r * n + j)]);
                    dG.at(j) += T(s);
                }
            }
            if (g.needs_(beta)) {
                TensorT<T>& dB = g.ensure_grad_(beta);
                for (int64_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int64_t r = 0; r < rows; ++r) s += double(dY.data[size_t(r * n + j)]);
                    dB.at(j) += T(s);
                }
            }
            if (g.needs_(x)) {
                TensorT<T>& dX = g.ensure_grad_(x);
                for (int64_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t j = 0; j < n; ++j) {
                        const double gg = double(G2.at(j)) * double(dY.data[size_t(r * n + j)]);
                        m1 += gg;
                        m2 += gg * double(xhat[size_t(r * n + j)]);
                    }
                    m1 /= double(n);
                    m2 /= double(n);
                    for (int64_t j = 0; j < n; ++j) {
                        const double gg = double(G2.at(j)) * double(dY.data[size_t(r * n + j)]);
                        dX.data[size_t(r * n + j)] +=
                            T(inv_std[size_t(r)] * (gg - m1 - double(xhat[size_t(r * n + j)]) * m2));
                    }
                }
            }
        };
        return id;
    }

    // Softmax along `axis` with max-subtraction; optional boolean mask (same
    // numel as x, 1 = keep) zeroes masked positions exactly. Every slice must
    // keep at least one unmasked entry.
    int softmax(int x, int axis, const std::vector<uint8_t>* mask = nullptr) {
        const TensorT<T>& X = val_(x);
        check_shape(axis >= 0 && axis < X.rank(), "softmax axis out of range");
        if (mask) check_shape(int64_t(mask->size()) == X.numel(), "softmax mask size mismatch");
        const int64_t len = X.dim(axis);
        int64_t inner = 1;
        for (int i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
        const int64_t outer = len == 0 ? 0 : X.numel() / (len * inner);
        TensorT<T> out(X.shape);
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < len; ++j) {
                    const int64_t idx = base + j * inner;
                    if (mask && !(*mask)[size_t(idx)]) continue;
                    mx = std::max(mx, double(X.data[size_t(idx)]));
                }
                if (!std::isfinite(mx)) throw ContractError("softmax: fully masked slice");
                double denom = 0.0;
                for (int64_t j = 0; j < len; ++j) {
                    const int64_t idx = base + j * inner;
                    if (mask && !(*mask)[size_t(idx)]) {
                        out.data[size_t(idx)] = T(0);
                        continue;
                    }
                    const double e = std::exp(double(X.data[size_t(idx)]) - mx);
                    out.data[size_t(idx)] = T(e);
                    denom += e;
                }
                for (int64_t j = 0; j < len; ++j) {
                    const int64_t idx = base + j * inner;
                    if (mask && !(*mask)[size_t(idx)]) continue;
                    out.data[size_t(idx)] = T(double(out.data[size_t(idx)]) / denom);
                }
            }
        }
        const int id = make_node_(std::move(out), needs_(x));
        nodes_[size_t(id)].bwd = [x, len, inner, outer](GraphT& g, int self) {
            if (!g.needs_(x)) return;
            const TensorT<T>& dY = g.nodes_[size_t(self)].grad;
            const TensorT<T>& Y = g.nodes_[size_t(self)].val;
            TensorT<T>& dX = g.ensure_grad_(x);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (int64_t j = 0; j < len; ++j) {
                        const int64_t idx = base + j * inner;
                        dot += double(dY.data[size_t(idx)]) * double(Y.data[size_t(idx)]);
                    }
                    for (int64_t j = 0; j < len; ++j) {
                        const int64_t idx = base + j * inner;
                        dX.data[size_t(idx)] +=
                            T(double(Y.data[size_t(idx)]) * (double(dY.data[size_t(idx)]) - dot));
                    }
                }
            }
        };
        return id;
    }

    int softmax_rows(int x, const std::vector<uint8_t>* mask = nullptr) {
        return softmax(x, val_(x).rank() - 1, mask);
    }

    // Inverted dropout; identity when p == 0. Mask is drawn from the seeded
    // counter RNG, so the op is deterministic given (seed).
    int dropout(int a, double p, uint64_t seed) {
        check_arg(p >= 0.0 && p < 1.0, "dropout rate must be in [0,1)");
        if (p == 0.0) return a;
        const TensorT<T>& A = val_(a);
        Rng rng(seed, hash_str("dropout"));
        std::vector<uint8_t> keep(static_cast<size_t>(A.numel()));
        const double inv = 1.0 / (1.0 - p);
        TensorT<T> out = A;
        for (int64_t i = 0; i < A.numel(); ++i) {
            keep[size_t(i)] = rng.uniform() >= p ? 1 : 0;
            out.at(i) = keep[size_t(i)] ? T(double(out.at(i)) * inv) : T(0);
        }
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a, inv, keep = std::move(keep)](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dC.numel(); ++i)
                if (keep[size_t(i)]) dA.at(i) += T(double(dC.at(i)) * inv);
        };
        return id;
    }

    int slice_rows(int a, int64_t r0, int64_t r1) {
        const TensorT<T>& A = val_(a);
        check_shape(A.rank() == 2 && r0 >= 0 && r0 <= r1 && r1 <= A.rows(), "slice_rows out of range");
        const int64_t c = A.cols();
        TensorT<T> out({r1 - r0, c});
        std::copy(A.data.begin() + r0 * c, A.data.begin() + r1 * c, out.data.begin());
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a, r0, c](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dC.rows(); ++i)
                for (int64_t j = 0; j < c; ++j) dA.at(r0 + i, j) += dC.at(i, j);
        };
        return id;
    }

    int slice_cols(int a, int64_t c0, int64_t c1) {
        const TensorT<T>& A = val_(a);
        check_shape(A.rank() == 2 && c0 >= 0 && c0 <= c1 && c1 <= A.cols(), "slice_cols out of range");
        TensorT<T> out({A.rows(), c1 - c0});
        for (int64_t i = 0; i < A.rows(); ++i)
            for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a, c0](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dC.rows(); ++i)
                for (int64_t j = 0; j < dC.cols(); ++j) dA.at(i, c0 + j) += dC.at(i, j);
        };
        return id;
    }

    int concat_rows(const std::vector<int>& parts) {
        check_arg(!parts.empty(), "concat_rows: empty part list");
        const int64_t c = val_(parts[0]).cols();
        int64_t rows = 0;
        bool needs = false;
        for (int p : parts) {
            check_shape(val_(p).rank() == 2 && val_(p).cols() == c, "concat_rows column mismatch");
            rows += val_(p).rows();
            needs = needs || needs_(p);
        }
        TensorT<T> out({rows, c});
        int64_t r = 0;
        for (int p : parts) {
            const TensorT<T>& P = val_(p);
            std::copy(P.data.begin(), P.data.end(), out.data.begin() + r * c);
            r += P.rows();
        }
        const int id = make_node_(std::move(out), needs);
        nodes_[size_t(id)].bwd = [parts, c](GraphT& g, int self) {
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            int64_t r = 0;
            for (int p : parts) {
                const int64_t pr = g.val_(p).rows();
                if (g.needs_(p)) {
                    TensorT<T>& dP = g.ensure_grad_(p);
                    for (int64_t i = 0; i < pr; ++i)
                        for (int64_t j = 0; j < c; ++j) dP.at(i, j) += dC.at(r + i, j);
                }
                r += pr;
            }
        };
        return id;
    }

    int concat_cols(const std::vector<int>& parts) {
        check_arg(!parts.empty(), "concat_cols: empty part list");
        const int64_t r = val_(parts[0]).rows();
        int64_t cols = 0;
        bool needs = false;
        for (int p : parts) {
            check_shape(val_(p).rank() == 2 && val_(p).rows() == r, "concat_cols row mismatch");
            cols += val_(p).cols();
            needs = needs || needs_(p);
        }
        TensorT<T> out({r, cols});
        int64_t c = 0;
        for (int p : parts) {
            const TensorT<T>& P = val_(p);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < P.cols(); ++j) out.at(i, c + j) = P.at(i, j);
            c += P.cols();
        }
        const int id = make_node_(std::move(out), needs);
        nodes_[size_t(id)].bwd = [parts](GraphT& g, int self) {
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            int64_t c = 0;
            for (int p : parts) {
                const int64_t pc = g.val_(p).cols();
                if (g.needs_(p)) {
                    TensorT<T>& dP = g.ensure_grad_(p);
                    for (int64_t i = 0; i < dP.rows(); ++i)
                        for (int64_t j = 0; j < pc; ++j) dP.at(i, j) += dC.at(i, c + j);
                }
                c += pc;
            }
        };
        return id;
    }

    // out[i, :] = emb[idx[i], :]
    int gather_rows(int emb, std::vector<int64_t> idx) {
        const TensorT<T>& E = val_(emb);
        check_shape(E.rank() == 2, "gather_rows expects rank-2 table");
        for (int64_t i : idx) check_arg(i >= 0 && i < E.rows(), "gather_rows index out of range");
        TensorT<T> out({int64_t(idx.size()), E.cols()});
        for (size_t i = 0; i < idx.size(); ++i)
            for (int64_t j = 0; j < E.cols(); ++j) out.at(int64_t(i), j) = E.at(idx[i], j);
        const int id = make_node_(std::move(out), needs_(emb));
        nodes_[size_t(id)].bwd = [emb, idx = std::move(idx)](GraphT& g, int self) {
            if (!g.needs_(emb)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dE = g.ensure_grad_(emb);
            for (size_t i = 0; i < idx.size(); ++i)
                for (int64_t j = 0; j < dC.cols(); ++j) dE.at(idx[i], j) += dC.at(int64_t(i), j);
        };
        return id;
    }

    // 1-D v (d) -> (n x d) with every row equal to v.
    int broadcast_row(int v, int64_t n) {
        const TensorT<T>& V = val_(v);
        check_shape(V.rank() == 1, "broadcast_row expects rank-1");
        TensorT<T> out({n, V.dim(0)});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < V.dim(0); ++j) out.at(i, j) = V.at(j);
        const int id = make_node_(std::move(out), needs_(v));
        nodes_[size_t(id)].bwd = [v](GraphT& g, int self) {
            if (!g.needs_(v)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dV = g.ensure_grad_(v);
            for (int64_t j = 0; j < dC.cols(); ++j) {
                double s = 0.0;
                for (int64_t i = 0; i < dC.rows(); ++i) s += double(dC.at(i, j));
                dV.at(j) += T(s);
            }
        };
        return id;
    }

    // (m x n) -> (n), summing down each column in f64.
    int sum_over_rows(int a) {
        const TensorT<T>& A = val_(a);
        check_shape(A.rank() == 2, "sum_over_rows expects rank-2");
        TensorT<T> out({A.cols()});
        for (int64_t j = 0; j < A.cols(); ++j) {
            double s = 0.0;
            for (int64_t i = 0; i < A.rows(); ++i) s += double(A.at(i, j));
            out.at(j) = T(s);
        }
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const TensorT<T>& dC = g.nodes_[size_t(self)].grad;
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dA.rows(); ++i)
                for (int64_t j = 0; j < dA.cols(); ++j) dA.at(i, j) += dC.at(j);
        };
        return id;
    }

    int sum_all(int a) {
        const TensorT<T>& A = val_(a);
        double s = 0.0;
        for (int64_t i = 0; i < A.numel(); ++i) s += double(A.at(i));
        TensorT<T> out({1});
        out.at(0) = T(s);
        const int id = make_node_(std::move(out), needs_(a));
        nodes_[size_t(id)].bwd = [a](GraphT& g, int self) {
            if (!g.needs_(a)) return;
            const T d = g.nodes_[size_t(self)].grad.at(0);
            TensorT<T>& dA = g.ensure_grad_(a);
            for (int64_t i = 0; i < dA.numel(); ++i) dA.at(i) += d;
        };
        return id;
    }

    // Mean-reduced squared error. pred may be (n) or (n x 1); target is (n).
    int mse_loss(int pred, const TensorT<T>& target) {
        const TensorT<T>& P = val_(pred);
        const int64_t n = target.numel();
        check_shape(P.numel() == n && n > 0, "mse_loss shape mismatch");
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = double(P.at(i)) - double(target.at(i));
            s += d * d;
        }
        TensorT<T> out({1});
        out.at(0) = T(s / double(n));
        const int id = make_node_(std::move(out), needs_(pred));
        nodes_[size_t(id)].bwd = [pred, target, n](GraphT& g, int self) {
            if (!g.needs_(pred)) return;
            const double d = double(g.nodes_[size_t(self)].grad.at(0));
            const TensorT<T>& P2 = g.val_(pred);
            TensorT<T>& dP = g.ensure_grad_(pred);
            for (int64_t i = 0; i < n; ++i)
                dP.at(i) += T(d * 2.0 * (double(P2.at(i)) - double(target.at(i))) / double(n));
        };
        return id;
    }

    // Mean-reduced cross entropy over the first `active` logit columns.
    int cross_entropy_loss(int logits, const std::vector<int64_t>& labels, int64_t active) {
        const TensorT<T>& L = val_(logits);
        check_shape(L.rank() == 2 && L.rows() == int64_t(labels.size()) && L.rows() > 0,
                    "cross_entropy shape mismatch");
        check_arg(active >= 1 && active <= L.cols(), "cross_entropy: bad active class count");
        for (int64_t y : labels)
            check_arg(y >= 0 && y < active, "label error: class index " + std::to_string(y) +
                                                " >= active class count " + std::to_string(active));
        const int64_t n = L.rows();
        double total = 0.0;
        std::vector<T> probs(static_cast<size_t>(n * active));
        for (int64_t i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t c = 0; c < active; ++c) mx = std::max(mx, double(L.at(i, c)));
            double denom = 0.0;
            for (int64_t c = 0; c < active; ++c) denom += std::exp(double(L.at(i, c)) - mx);
            const double lse = std::log(denom) + mx;
            total += lse - double(L.at(i, labels[size_t(i)]));
            for (int64_t c = 0; c < active; ++c)
                probs[size_t(i * active + c)] = T(std::exp(double(L.at(i, c)) - lse));
        }
        TensorT<T> out({1});
        out.at(0) = T(total / double(n));
        const int id = make_node_(std::move(out), needs_(logits));
        nodes_[size_t(id)].bwd = [logits, labels, active, n, probs = std::move(probs)](GraphT& g, int self) {
            if (!g.needs_(logits)) return;
            const double d = double(g.nodes_[size_t(self)].grad.at(0));
            TensorT<T>& dL = g.ensure_grad_(logits);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t c = 0; c < active; ++c) {
                    const double p = double(probs[size_t(i * active + c)]);
                    const double ind = (labels[size_t(i)] == c) ? 1.0 : 0.0;
                    dL.at(i, c) += T(d * (p - ind) / double(n));
                }
        };
        return id;
    }

    // ---- backward ----

    void backward(int loss) {
        check_arg(loss >= 0 && loss < int(nodes_.size()), "backward: bad node id");
        if (nodes_[size_t(loss)].val.numel() != 1) throw ContractError("backward: loss node must be scalar");
        ensure_grad_(loss).at(0) = T(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (!n.needs_grad || n.grad.data.empty() || !n.bwd) continue;
            n.bwd(*this, i);
        }
    }

    // One gradient tensor per trainable store entry; parameters that never
    // touched the loss get zeros.
    GradMapT<T> trainable_grads(const ParamStoreT<T>& store) const {
        GradMapT<T> out;
        for (const auto& name : store.names()) {
            const auto& e = store.at(name);
            if (!e.trainable) continue;
            auto it = param_nodes_.find(name);
            if (it != param_nodes_.end() && !nodes_[size_t(it->second)].grad.data.empty())
                out.emplace(name, nodes_[size_t(it->second)].grad);
            else
                out.emplace(name, TensorT<T>(e.tensor.shape));
        }
        return out;
    }

private:
    const TensorT<T>& val_(int id) const { return nodes_[size_t(id)].val; }
    bool needs_(int id) const { return nodes_[size_t(id)].needs_grad; }

    TensorT<T>& ensure_grad_(int id) {
        Node& n = nodes_[size_t(id)];
        if (n.grad.data.empty()) n.grad = TensorT<T>(n.val.shape);
        return n.grad;
    }

    void accumulate_(int id, const TensorT<T>& d) {
        TensorT<T>& g = ensure_grad_(id);
        for (int64_t i = 0; i < d.numel(); ++i) g.at(i) += d.at(i);
    }

    int make_node_(TensorT<T> val, bool needs_grad) {
        Node n;
        n.val = std::move(val);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> param_nodes_;
};

using Graph = GraphT<float>;

// Scalar loss value for already-computed predictions: mean MSE for
// regression, mean cross entropy (logits in the first `active` columns) for
// classification.
template <typename T>
double loss_value(const TensorT<T>& pred, const TensorT<T>& target, TaskType task,
                  const std::vector<int64_t>& labels = {}, int64_t active = 0) {
    GraphT<T> g;
    const int p = g.input(pred);
    if (task == TaskType::regression) return double(g.scalar_value(g.mse_loss(p, target)));
    return double(g.scalar_value(g.cross_entropy_loss(p, labels, active)));
}

// Central-difference gradient verification. `build` constructs a scalar loss
// from the store's current parameters; analytic gradients come from one
// backward pass, finite differences from 2 re-evaluations per sampled
// coordinate. Per parameter the reported error is
//     max_i |analytic_i - fd_i| / (max_i |analytic_i| + 1e-8)
// i.e. the difference and the analytic gradient are compared as per-parameter
// magnitudes; the result is the max over trainable parameters.
// samples_per_param == 0 checks every coordinate. Frozen entries are
// excluded. Intended to run with T=double.
template <typename T>
double grad_check(const std::function<int(GraphT<T>&, const ParamStoreT<T>&)>& build,
                  ParamStoreT<T>& store, double h, int64_t samples_per_param = 0, uint64_t seed = 0) {
    GraphT<T> g;
    const int loss = build(g, store);
    g.backward(loss);
    const GradMapT<T> analytic = g.trainable_grads(store);

    auto eval = [&]() {
        GraphT<T> ge;
        return double(ge.scalar_value(build(ge, store)));
    };

    Rng rng(seed, hash_str("grad_check"));
    double max_err = 0.0;
    for (const auto& name : store.names()) {
        auto& e = store.at(name);
        if (!e.trainable) continue;
        const TensorT<T>& ga = analytic.at(name);
        std::vector<int64_t> coords;
        if (samples_per_param <= 0 || samples_per_param >= e.tensor.numel()) {
            coords.resize(size_t(e.tensor.numel()));
            for (int64_t i = 0; i < e.tensor.numel(); ++i) coords[size_t(i)] = i;
        } else {
            for (int64_t i = 0; i < samples_per_param; ++i) coords.push_back(rng.below(e.tensor.numel()));
        }
        double diff_inf = 0.0;
        double an_inf = 0.0;
        for (int64_t i : coords) {
            const T orig = e.tensor.at(i);
            e.tensor.at(i) = T(double(orig) + h);
            const double fp = eval();
            e.tensor.at(i) = T(double(orig) - h);
            const double fm = eval();
            e.tensor.at(i) = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = double(ga.at(i));
            diff_inf = std::max(diff_inf, std::abs(an - fd));
            an_inf = std::max(an_inf, std::abs(an));
        }
        max_err = std::max(max_err, diff_inf / (an_inf + 1e-8));
    }
    return max_err;
}

}  // namespace pfnlab
