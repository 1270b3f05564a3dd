#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ahmf/errors.hpp"

namespace ahmf {

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major tensor. No views or strides: toy shapes make copies cheap
// and keep every op auditable. grad is empty unless requires_grad is set, in
// which case it always matches data in length.
template <typename S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;

    TensorT() = default;

    explicit TensorT(std::vector<int> sh, S fill = S(0)) : shape(std::move(sh)) {
        for (int e : shape)
            if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape));
        data.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<int>& sh) {
        std::size_t n = 1;
        for (int e : sh) n *= static_cast<std::size_t>(e);
        return n;
    }

    static TensorT zeros(std::vector<int> sh) { return TensorT(std::move(sh)); }
    static TensorT full(std::vector<int> sh, S v) { return TensorT(std::move(sh), v); }
    static TensorT from(std::vector<int> sh, std::vector<S> values) {
        TensorT t(std::move(sh));
        if (values.size() != t.data.size())
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(t.shape));
        t.data = std::move(values);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    int extent(int axis) const { return shape[static_cast<std::size_t>(axis)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    void set_requires_grad(bool on) {
        requires_grad = on;
        if (on)
            grad.assign(data.size(), S(0));
        else
            grad.clear();
    }
    void zero_grad() {
        if (requires_grad) std::fill(grad.begin(), grad.end(), S(0));
    }

    // Rank-specific offset helpers; callers are responsible for rank.
    std::size_t off2(int i, int j) const { return static_cast<std::size_t>(i) * shape[1] + j; }
    std::size_t off3(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x;
    }
    std::size_t off4(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x;
    }

    S& at2(int i, int j) { return data[off2(i, j)]; }
    S at2(int i, int j) const { return data[off2(i, j)]; }
    S& at3(int c, int y, int x) { return data[off3(c, y, x)]; }
    S at3(int c, int y, int x) const { return data[off3(c, y, x)]; }
    S& at4(int n, int c, int y, int x) { return data[off4(n, c, y, x)]; }
    S at4(int n, int c, int y, int x) const { return data[off4(n, c, y, x)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    TensorT reshaped(std::vector<int> sh) const {
        if (numel_of(sh) != data.size())
            throw DimensionError("cannot reshape " + shape_str(shape) + " to " + shape_str(sh));
        TensorT t;
        t.shape = std::move(sh);
        t.data = data;
        return t;
    }
};

using Tensor = TensorT<float>;

// Elementwise precision conversion, e.g. widening fp32 maps for the metrics.
template <typename To, typename From>
TensorT<To> cast_tensor(const TensorT<From>& t) {
    TensorT<To> out;
    out.shape = t.shape;
    out.data.resize(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i)
        out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

template <typename S>
inline void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
}

}  // namespace ahmf
