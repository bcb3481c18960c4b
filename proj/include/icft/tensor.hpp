#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "icft/errors.hpp"
#include "icft/rng.hpp"

namespace icft {

// Dense row-major tensor. Rank 1 and 2 cover everything this project needs;
// higher ranks are representable but no op accepts them.
template <class Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> data;

    Tensor() = default;
    Tensor(std::initializer_list<int> s, std::vector<Real> d) : shape(s), data(std::move(d)) {
        if (numel() != static_cast<int64_t>(data.size()))
            throw dim_error("tensor data length does not match shape");
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(static_cast<size_t>(t.numel()), Real(0));
        return t;
    }
    static Tensor full(std::vector<int> s, Real v) {
        Tensor t = zeros(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }
    static Tensor randn(std::vector<int> s, Rng& rng, Real stddev) {
        Tensor t = zeros(std::move(s));
        for (auto& x : t.data) x = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }
    static Tensor row_vector(std::vector<Real> d) {
        Tensor t;
        t.shape = {static_cast<int>(d.size())};
        t.data = std::move(d);
        return t;
    }
    static Tensor matrix(int r, int c, std::vector<Real> d) {
        Tensor t;
        t.shape = {r, c};
        t.data = std::move(d);
        if (t.numel() != static_cast<int64_t>(t.data.size()))
            throw dim_error("matrix data length does not match shape");
        return t;
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }

    int rows() const {
        if (rank() != 2) throw dim_error("rows() on non-matrix");
        return shape[0];
    }
    int cols() const {
        if (rank() != 2) throw dim_error("cols() on non-matrix");
        return shape[1];
    }
    int len() const {
        if (rank() != 1) throw dim_error("len() on non-vector");
        return shape[0];
    }

    Real& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    Real at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
    Real& operator[](size_t i) { return data[i]; }
    Real operator[](size_t i) const { return data[i]; }

    Real* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * shape[1]; }
    const Real* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

    void fill(Real v) {
        for (auto& x : data) x = v;
    }

    // Converting copy (f32 <-> f64 for checkpoint round trips).
    template <class Other>
    static Tensor from(const Tensor<Other>& o) {
        Tensor t;
        t.shape = o.shape;
        t.data.resize(o.data.size());
        for (size_t i = 0; i < o.data.size(); ++i) t.data[i] = static_cast<Real>(o.data[i]);
        return t;
    }
};

template <class Real>
void assert_all_finite(const Tensor<Real>& t, const char* what) {
    for (Real v : t.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw numeric_error(std::string("non-finite value produced by ") + what);
    }
}

// ---------------------------------------------------------------------------
// matmul kernels. Three orientations cover every forward/backward need:
//   matmul    : C[m,n]  = A[m,k] * B[k,n]
//   matmul_nt : C[m,n]  = A[m,k] * B[n,k]^T
//   matmul_tn : C[m,n]  = A[k,m]^T * B[k,n]
// The *_acc variants accumulate into an existing output (gradient sums).
// ---------------------------------------------------------------------------

template <class Real>
void matmul_acc(Tensor<Real>& c, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw dim_error("matmul expects matrices");
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    if (b.shape[0] != k)
        throw dim_error("matmul inner dims " + a.shape_str() + " vs " + b.shape_str());
    if (c.shape != std::vector<int>{m, n}) throw dim_error("matmul output shape");
    for (int i = 0; i < m; ++i) {
        const Real* ai = a.row_ptr(i);
        Real* ci = c.row_ptr(i);
        for (int p = 0; p < k; ++p) {
            const Real av = ai[p];
            if (av == Real(0)) continue;
            const Real* bp = b.row_ptr(p);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw dim_error("matmul expects matrices");
    Tensor<Real> c = Tensor<Real>::zeros({a.shape[0], b.shape[1]});
    matmul_acc(c, a, b);
    return c;
}

template <class Real>
void matmul_nt_acc(Tensor<Real>& c, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw dim_error("matmul_nt expects matrices");
    const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
    if (b.shape[1] != k)
        throw dim_error("matmul_nt inner dims " + a.shape_str() + " vs " + b.shape_str());
    if (c.shape != std::vector<int>{m, n}) throw dim_error("matmul_nt output shape");
    for (int i = 0; i < m; ++i) {
        const Real* ai = a.row_ptr(i);
        Real* ci = c.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const Real* bj = b.row_ptr(j);
            Real s = Real(0);
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
    Tensor<Real> c = Tensor<Real>::zeros({a.shape[0], b.shape[0]});
    matmul_nt_acc(c, a, b);
    return c;
}

template <class Real>
void matmul_tn_acc(Tensor<Real>& c, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw dim_error("matmul_tn expects matrices");
    const int k = a.shape[0], m = a.shape[1], n = b.shape[1];
    if (b.shape[0] != k)
        throw dim_error("matmul_tn inner dims " + a.shape_str() + " vs " + b.shape_str());
    if (c.shape != std::vector<int>{m, n}) throw dim_error("matmul_tn output shape");
    for (int p = 0; p < k; ++p) {
        const Real* ap = a.row_ptr(p);
        const Real* bp = b.row_ptr(p);
        for (int i = 0; i < m; ++i) {
            const Real av = ap[i];
            if (av == Real(0)) continue;
            Real* ci = c.row_ptr(i);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class Real>
Tensor<Real> matmul_tn(const Tensor<Real>& a, const Tensor<Real>& b) {
    Tensor<Real> c = Tensor<Real>::zeros({a.shape[1], b.shape[1]});
    matmul_tn_acc(c, a, b);
    return c;
}

// Numerically stabilized softmax over the last axis of a matrix (or a vector).
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
    Tensor<Real> y = x;
    const int r = x.rank() == 1 ? 1 : x.shape[0];
    const int c = x.rank() == 1 ? x.shape[0] : x.shape[1];
    for (int i = 0; i < r; ++i) {
        Real* row = y.data.data() + static_cast<size_t>(i) * c;
        Real mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        Real sum = Real(0);
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const Real inv = Real(1) / sum;
        for (int j = 0; j < c; ++j) row[j] *= inv;
    }
    return y;
}

// log(sum(exp(row))) for one row, stabilized.
template <class Real>
Real log_sum_exp_row(const Real* row, int n) {
    Real mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Real s = Real(0);
    for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    return mx + std::log(s);
}

// y += W x for row-major W[out,in]
template <class Real>
void matvec_acc(Real* y, const Tensor<Real>& w, const Real* x) {
    const int out = w.shape[0], in = w.shape[1];
    for (int i = 0; i < out; ++i) {
        const Real* wi = w.row_ptr(i);
        Real s = Real(0);
        for (int j = 0; j < in; ++j) s += wi[j] * x[j];
        y[i] += s;
    }
}

// tanh-approximation GELU; smooth, so finite-difference checks behave
template <class Real>
Real gelu_fwd(Real x) {
    const Real k = Real(0.7978845608028654);  // sqrt(2/pi)
    const Real c = Real(0.044715);
    const Real u = k * (x + c * x * x * x);
    return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <class Real>
Real gelu_bwd(Real x) {
    const Real k = Real(0.7978845608028654);
    const Real c = Real(0.044715);
    const Real u = k * (x + c * x * x * x);
    const Real th = std::tanh(u);
    const Real du = k * (Real(1) + Real(3) * c * x * x);
    return Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du;
}

}  // namespace icft
