#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "pfnlab/common.hpp"

namespace pfnlab {

// Dense row-major tensor. Storage type is a template parameter so the same
// graph code can run in f32 (normal path) and f64 (gradient checking).
template <typename T>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), fill);
    }

    TensorT(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        check_shape(int64_t(data.size()) == numel_of(shape), "tensor data length does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            check_shape(d >= 0, "negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int64_t dim(int i) const { return shape[size_t(i)]; }

    // rank-2 conveniences
    int64_t rows() const { return shape[0]; }
    int64_t cols() const { return shape[1]; }

    T& at(int64_t i) { return data[size_t(i)]; }
    T at(int64_t i) const { return data[size_t(i)]; }
    T& at(int64_t i, int64_t j) { return data[size_t(i * shape[1] + j)]; }
    T at(int64_t i, int64_t j) const { return data[size_t(i * shape[1] + j)]; }
    T& at(int64_t i, int64_t j, int64_t k) { return data[size_t((i * shape[1] + j) * shape[2] + k)]; }
    T at(int64_t i, int64_t j, int64_t k) const { return data[size_t((i * shape[1] + j) * shape[2] + k)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

using Tensor = TensorT<float>;

template <typename T>
TensorT<T> tensor2d(int64_t r, int64_t c, std::initializer_list<T> vals) {
    return TensorT<T>({r, c}, std::vector<T>(vals));
}

template <typename T>
TensorT<T> tensor1d(std::initializer_list<T> vals) {
    std::vector<T> v(vals);
    const int64_t n = int64_t(v.size());
    return TensorT<T>({n}, std::move(v));
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    check_shape(a.same_shape(b), "max_abs_diff shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
    return m;
}

}  // namespace pfnlab
