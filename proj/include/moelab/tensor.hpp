#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "moelab/common.hpp"

namespace moelab {

// Dense row-major n-d array. Reductions over it always run in flat index
// order so that repeated runs are bitwise identical.
template <typename S>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<S> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shp) : shape(std::move(shp)) {
        data.assign(numel_of(shape), S(0));
    }

    Tensor(std::vector<std::size_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (numel_of(shape) != data.size())
            throw DimensionError("tensor: shape/data size mismatch");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& shp) {
        std::size_t n = 1;
        for (std::size_t d : shp) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> shp) { return Tensor(std::move(shp)); }

    static Tensor full(std::vector<std::size_t> shp, S v) {
        Tensor t(std::move(shp));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(S v) { return Tensor({1}, {v}); }

    static Tensor row(std::vector<S> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    std::size_t rows() const {
        check(ndim() == 2, "tensor: rows() on non-2d tensor");
        return shape[0];
    }
    std::size_t cols() const {
        check(ndim() == 2, "tensor: cols() on non-2d tensor");
        return shape[1];
    }

    S& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    const S& at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    S* row_ptr(std::size_t r) { return data.data() + r * shape[1]; }
    const S* row_ptr(std::size_t r) const { return data.data() + r * shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

// --- fixed-order matrix kernels ---------------------------------------------
// Every accumulation below walks k (or the summed axis) in strictly increasing
// order per output element, so results do not depend on vectorization width or
// thread count and reruns are bitwise identical.

// c = a[m,k] * b[k,n]
template <typename S>
void mm_into(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& c) {
    check(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-d");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dims disagree " + a.shape_str() + " vs " + b.shape_str());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    c.shape = {m, n};
    c.data.assign(m * n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a.row_ptr(i);
        S* crow = c.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b.row_ptr(p);
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename S>
Tensor<S> mm(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> c;
    mm_into(a, b, c);
    return c;
}

// c += a[m,k] * b[n,k]^T   (i.e. c[i][j] += dot(a_i, b_j))
template <typename S>
void mm_nt_acc(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& c) {
    if (a.cols() != b.cols())
        throw DimensionError("mm_nt: inner dims disagree");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    check(c.rows() == m && c.cols() == n, "mm_nt: bad output shape");
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a.row_ptr(i);
        S* crow = c.row_ptr(i);
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = b.row_ptr(j);
            S acc = S(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

template <typename S>
Tensor<S> mm_nt(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> c({a.rows(), b.rows()});
    mm_nt_acc(a, b, c);
    return c;
}

// c += a[k,m]^T * b[k,n]
template <typename S>
void mm_tn_acc(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& c) {
    if (a.rows() != b.rows())
        throw DimensionError("mm_tn: inner dims disagree");
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    check(c.rows() == m && c.cols() == n, "mm_tn: bad output shape");
    for (std::size_t p = 0; p < k; ++p) {
        const S* arow = a.row_ptr(p);
        const S* brow = b.row_ptr(p);
        for (std::size_t i = 0; i < m; ++i) {
            const S av = arow[i];
            S* crow = c.row_ptr(i);
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
    Tensor<S> t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Row-wise softmax with max subtraction; each row sums to 1 up to rounding.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    check(x.ndim() == 2, "softmax: expects 2-d input");
    Tensor<S> y(x.shape);
    const std::size_t n = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const S* in = x.row_ptr(r);
        S* out = y.row_ptr(r);
        S mx = in[0];
        for (std::size_t j = 1; j < n; ++j) mx = in[j] > mx ? in[j] : mx;
        S sum = S(0);
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
    }
    return y;
}

// Rotary embedding over adjacent pairs. `heads` partitions the last dim; each
// head gets the same frequency ladder. Rotation preserves pair norms.
template <typename S>
Tensor<S> rope_apply(const Tensor<S>& x, const std::vector<std::size_t>& positions, double base,
                     std::size_t heads = 1) {
    check(x.ndim() == 2, "rope: expects 2-d input");
    check(x.rows() == positions.size(), "rope: one position per row");
    const std::size_t d = x.cols();
    if (heads == 0 || d % heads != 0) throw DimensionError("rope: heads must divide width");
    const std::size_t hd = d / heads;
    if (hd % 2 != 0) throw DimensionError("rope: rotary width per head must be even");
    Tensor<S> y(x.shape);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double pos = static_cast<double>(positions[r]);
        const S* in = x.row_ptr(r);
        S* out = y.row_ptr(r);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t p = 0; p < hd / 2; ++p) {
                const double theta = pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
                const S c = static_cast<S>(std::cos(theta));
                const S s = static_cast<S>(std::sin(theta));
                const S a = in[off + 2 * p];
                const S b = in[off + 2 * p + 1];
                out[off + 2 * p] = a * c - b * s;
                out[off + 2 * p + 1] = a * s + b * c;
            }
        }
    }
    return y;
}

template <typename S>
double l2_norm(const S* v, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(v[i]) * static_cast<double>(v[i]);
    return std::sqrt(acc);
}

template <typename S>
double l2_norm(const Tensor<S>& t) {
    return l2_norm(t.data.data(), t.numel());
}

}  // namespace moelab
