#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ribsr/common.hpp"

namespace ribsr {

using Dims = std::vector<std::size_t>;

inline std::string format_dims(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (i) os << ",";
        os << d[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t dims_numel(const Dims& d) {
    std::size_t n = 1;
    for (std::size_t v : d) n *= v;
    return n;
}

/// Dense row-major n-dimensional array. Immutable by convention once built:
/// all the ops below return fresh tensors. Rank >= 1, every dim >= 1.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    TensorT(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
        check_invariants();
        if (data_.size() != numel())
            throw DimError("tensor data length " + std::to_string(data_.size()) +
                           " does not match dims " + format_dims(dims_));
    }

    static TensorT zeros(Dims dims) {
        std::size_t n = dims_numel(dims);
        return TensorT(std::move(dims), std::vector<T>(n, T(0)));
    }

    static TensorT full(Dims dims, T v) {
        std::size_t n = dims_numel(dims);
        return TensorT(std::move(dims), std::vector<T>(n, v));
    }

    static TensorT from_list(Dims dims, std::initializer_list<T> vals) {
        return TensorT(std::move(dims), std::vector<T>(vals));
    }

    bool empty() const { return dims_.empty(); }
    std::size_t rank() const { return dims_.size(); }
    std::size_t dim(std::size_t i) const { return dims_.at(i); }
    const Dims& dims() const { return dims_; }
    std::size_t numel() const { return dims_numel(dims_); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& buffer() { return data_; }
    const std::vector<T>& buffer() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at2(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
    T& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    const T& at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * dims_[1] + j) * dims_[2] + k];
    }
    T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }
    const T& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
    }

    /// Same data, new dims (numel must match).
    TensorT reshaped(Dims new_dims) const {
        if (dims_numel(new_dims) != numel())
            throw DimError("reshape " + format_dims(dims_) + " -> " + format_dims(new_dims) +
                           " changes element count");
        return TensorT(std::move(new_dims), data_);
    }

    bool bit_equal(const TensorT& o) const { return dims_ == o.dims_ && data_ == o.data_; }

private:
    void check_invariants() const {
        if (dims_.empty()) throw DimError("tensor rank must be >= 1");
        for (std::size_t v : dims_)
            if (v == 0) throw DimError("tensor dims must be positive, got " + format_dims(dims_));
    }

    Dims dims_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.dims() != b.dims())
        throw DimError(std::string(op) + ": shape mismatch " + format_dims(a.dims()) + " vs " +
                       format_dims(b.dims()));
}

}  // namespace detail

template <typename T, typename F>
TensorT<T> map_unary(const TensorT<T>& a, F&& f) {
    TensorT<T> out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(out[i]);
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    TensorT<T> out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    TensorT<T> out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    TensorT<T> out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
    return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    return map_unary(a, [c](T v) { return v * c; });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    return map_unary(a, [](T v) { return v > T(0) ? v : T(0); });
}

template <typename T>
T sigmoid_scalar(T x) {
    // Split on sign so exp never overflows.
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return map_unary(a, [](T v) { return sigmoid_scalar(v); });
}

template <typename T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_grad_scalar(T x) {
    const T phi = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);  // N(0,1) pdf
    const T Phi = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    return Phi + x * phi;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
    return map_unary(a, [](T v) { return gelu_scalar(v); });
}

template <typename T>
T sum(const TensorT<T>& a) {
    T s = T(0);
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i];
    return s;
}

template <typename T>
T max_abs(const TensorT<T>& a) {
    T m = T(0);
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <typename T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "max_abs_diff");
    T m = T(0);
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// --- batched matmul -------------------------------------------------------
//
// a: [batch..., m, k], b: [batch..., k, n] (or [batch..., n, k] with
// trans_b). Leading batch dims broadcast from size 1; a missing leading dim
// counts as 1. Summation over k runs left to right, so results are
// bit-reproducible for a given dtype.

namespace detail {

struct MatmulPlan {
    Dims out_dims;
    std::size_t batch = 1;
    std::size_t m = 0, k = 0, n = 0;
    // Per output batch index: element offsets into a and b.
    std::vector<std::size_t> a_off, b_off;
};

inline MatmulPlan plan_matmul(const Dims& ad, const Dims& bd, bool trans_b, const char* op) {
    if (ad.size() < 2 || bd.size() < 2)
        throw DimError(std::string(op) + ": operands must have rank >= 2, got " +
                       format_dims(ad) + " and " + format_dims(bd));
    MatmulPlan p;
    p.m = ad[ad.size() - 2];
    p.k = ad[ad.size() - 1];
    const std::size_t bk = trans_b ? bd[bd.size() - 1] : bd[bd.size() - 2];
    p.n = trans_b ? bd[bd.size() - 2] : bd[bd.size() - 1];
    if (p.k != bk)
        throw DimError(std::string(op) + ": inner dims disagree, " + format_dims(ad) + " x " +
                       format_dims(bd) + (trans_b ? " (b transposed)" : ""));

    const std::size_t abr = ad.size() - 2, bbr = bd.size() - 2;
    const std::size_t br = std::max(abr, bbr);
    Dims batch_dims(br, 1);
    for (std::size_t i = 0; i < br; ++i) {
        const std::size_t av = i < br - abr ? 1 : ad[i - (br - abr)];
        const std::size_t bv = i < br - bbr ? 1 : bd[i - (br - bbr)];
        if (av != bv && av != 1 && bv != 1)
            throw DimError(std::string(op) + ": batch dims disagree, " + format_dims(ad) +
                           " x " + format_dims(bd));
        batch_dims[i] = std::max(av, bv);
    }
    p.out_dims = batch_dims;
    p.out_dims.push_back(p.m);
    p.out_dims.push_back(p.n);
    p.batch = dims_numel(batch_dims);
    if (batch_dims.empty()) p.batch = 1;

    p.a_off.resize(p.batch);
    p.b_off.resize(p.batch);
    const std::size_t a_mat = p.m * p.k;
    const std::size_t b_mat = p.k * p.n;
    for (std::size_t idx = 0; idx < p.batch; ++idx) {
        std::size_t rem = idx, ao = 0, bo = 0;
        // Decompose idx into batch coordinates (row-major over batch_dims).
        std::vector<std::size_t> coord(br, 0);
        for (std::size_t i = br; i-- > 0;) {
            coord[i] = rem % batch_dims[i];
            rem /= batch_dims[i];
        }
        std::size_t astride = a_mat, bstride = b_mat;
        for (std::size_t i = br; i-- > 0;) {
            const std::size_t av = i < br - abr ? 1 : ad[i - (br - abr)];
            const std::size_t bv = i < br - bbr ? 1 : bd[i - (br - bbr)];
            ao += (av == 1 ? 0 : coord[i]) * astride;
            bo += (bv == 1 ? 0 : coord[i]) * bstride;
            astride *= av;
            bstride *= bv;
        }
        p.a_off[idx] = ao;
        p.b_off[idx] = bo;
    }
    return p;
}

}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, bool trans_b = false) {
    const auto p = detail::plan_matmul(a.dims(), b.dims(), trans_b, "matmul");
    TensorT<T> out = TensorT<T>::zeros(p.out_dims);
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    const std::size_t om = p.m * p.n;
    for (std::size_t bi = 0; bi < p.batch; ++bi) {
        const T* A = ad + p.a_off[bi];
        const T* B = bd + p.b_off[bi];
        T* O = od + bi * om;
        for (std::size_t i = 0; i < p.m; ++i) {
            for (std::size_t j = 0; j < p.n; ++j) {
                T acc = T(0);
                if (!trans_b) {
                    for (std::size_t kk = 0; kk < p.k; ++kk)
                        acc += A[i * p.k + kk] * B[kk * p.n + j];
                } else {
                    for (std::size_t kk = 0; kk < p.k; ++kk)
                        acc += A[i * p.k + kk] * B[j * p.k + kk];
                }
                O[i * p.n + j] = acc;
            }
        }
    }
    return out;
}

/// Row-wise softmax over the last dim. Entries must be finite or -inf (the
/// mask sentinel); a row of all -inf maps to all zeros. Max-subtraction keeps
/// large logits from overflowing.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& s) {
    const std::size_t n = s.dim(s.rank() - 1);
    const std::size_t rows = s.numel() / n;
    TensorT<T> out = s;
    T* d = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = d + r * n;
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN input");
            m = std::max(m, row[j]);
        }
        if (m == -std::numeric_limits<T>::infinity()) {
            for (std::size_t j = 0; j < n; ++j) row[j] = T(0);
            continue;
        }
        T denom = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - m);
            denom += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= denom;
    }
    return out;
}

/// Transpose of the last two dims.
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& a) {
    if (a.rank() < 2) throw DimError("transpose_last2: rank must be >= 2");
    Dims d = a.dims();
    std::swap(d[d.size() - 1], d[d.size() - 2]);
    const std::size_t m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
    const std::size_t batch = a.numel() / (m * n);
    TensorT<T> out = TensorT<T>::zeros(d);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out[b * m * n + j * m + i] = a[b * m * n + i * n + j];
    return out;
}

template <typename T>
TensorT<T> random_uniform(Dims dims, Rng& rng, T lo = T(-1), T hi = T(1)) {
    TensorT<T> out = TensorT<T>::zeros(std::move(dims));
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return out;
}

template <typename T>
TensorT<T> random_normal(Dims dims, Rng& rng, T stddev = T(1)) {
    TensorT<T> out = TensorT<T>::zeros(std::move(dims));
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return out;
}

template <typename To, typename From>
TensorT<To> cast_tensor(const TensorT<From>& a) {
    TensorT<To> out = TensorT<To>::zeros(a.dims());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = static_cast<To>(a[i]);
    return out;
}

}  // namespace ribsr
