#pragma once

// Dense row-major tensor with an explicit gradient buffer. This is the value
// type of the whole numerical core: volumes, feature maps, weights and fully
// connected matrices are all Tensor<T> instances of different rank.
//
// Backward passes are composed by hand in reverse topological order (the
// network is a fixed DAG), so there is no tape here: every op has a forward
// function and a backward function that accumulates into .grad.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scaae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// All precondition violations surface as invalid_argument with a message
// naming the offending values.
inline void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty unless requires_grad
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(Shape s, bool rg = false) : shape(std::move(s)) {
        data.assign(shape_numel(shape), T(0));
        set_requires_grad(rg);
    }

    static Tensor full(Shape s, T value) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), value);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg)
            grad.assign(data.size(), T(0));
        else
            grad.clear();
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

    template <typename... Ix>
    std::size_t offset(Ix... ix) const {
        const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
        require(sizeof...(ix) == shape.size(),
                "Tensor::offset: rank mismatch for shape " + shape_str(shape));
        std::size_t off = 0;
        for (std::size_t i = 0; i < shape.size(); ++i) {
            require(idx[i] < shape[i], "Tensor::offset: index out of range");
            off = off * shape[i] + idx[i];
        }
        return off;
    }

    template <typename... Ix>
    T& at(Ix... ix) { return data[offset(ix...)]; }
    template <typename... Ix>
    const T& at(Ix... ix) const { return data[offset(ix...)]; }
};

template <typename T>
inline bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

// Fixed-order chunked sum. Reductions throughout the engine go through this
// (or mirror its lane pattern) so that results are bitwise identical across
// runs and thread counts: each output element is always reduced in the same
// order, and the lane layout lets the compiler vectorize without
// -ffast-math style reassociation.
template <typename T>
inline T sum_fixed_order(const T* __restrict p, std::size_t n) {
    constexpr std::size_t kLanes = 16;
    T lanes[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += p[i + l];
    T tail = T(0);
    for (; i < n; ++i) tail += p[i];
    T s = T(0);
    for (std::size_t l = 0; l < kLanes; ++l) s += lanes[l];
    return s + tail;
}

// Fixed-order dot product of two contiguous rows (b optionally strided).
template <typename T>
inline T dot_fixed_order(const T* __restrict a, const T* __restrict b,
                         std::size_t n, std::size_t b_stride = 1) {
    if (b_stride == 1) {
        constexpr std::size_t kLanes = 16;
        T lanes[kLanes] = {};
        std::size_t i = 0;
        for (; i + kLanes <= n; i += kLanes)
            for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += a[i + l] * b[i + l];
        T tail = T(0);
        for (; i < n; ++i) tail += a[i] * b[i];
        T s = T(0);
        for (std::size_t l = 0; l < kLanes; ++l) s += lanes[l];
        return s + tail;
    }
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i * b_stride];
    return s;
}

}  // namespace scaae
