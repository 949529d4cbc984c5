#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "equidiag/errors.hpp"

namespace equidiag {

using VecX = std::vector<double>;

// ---------------------------------------------------------------------------
// 3x3 matrices (group elements act through these)
// ---------------------------------------------------------------------------

struct Mat3 {
    // Row-major.
    std::array<double, 9> a{};

    static Mat3 identity() {
        Mat3 m;
        m.a = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return m;
    }

    double operator()(int i, int j) const { return a[static_cast<std::size_t>(3 * i + j)]; }
    double& operator()(int i, int j) { return a[static_cast<std::size_t>(3 * i + j)]; }

    Mat3 transpose() const {
        Mat3 t;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) t(i, j) = (*this)(j, i);
        return t;
    }

    double det() const {
        const Mat3& m = *this;
        return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
               m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
               m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    }
};

inline Mat3 operator*(const Mat3& x, const Mat3& y) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += x(i, k) * y(k, j);
            r(i, j) = s;
        }
    return r;
}

inline std::array<double, 3> operator*(const Mat3& m, const std::array<double, 3>& v) {
    return {m(0, 0) * v[0] + m(0, 1) * v[1] + m(0, 2) * v[2],
            m(1, 0) * v[0] + m(1, 1) * v[1] + m(1, 2) * v[2],
            m(2, 0) * v[0] + m(2, 1) * v[1] + m(2, 2) * v[2]};
}

inline double max_abs_diff(const Mat3& x, const Mat3& y) {
    double m = 0;
    for (int i = 0; i < 9; ++i) m = std::max(m, std::abs(x.a[static_cast<std::size_t>(i)] - y.a[static_cast<std::size_t>(i)]));
    return m;
}

// ---------------------------------------------------------------------------
// Dense row-major matrices of arbitrary size
// ---------------------------------------------------------------------------

struct MatX {
    std::size_t rows = 0;
    std::size_t cols = 0;
    VecX a;

    MatX() = default;
    MatX(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }

    std::span<const double> row(std::size_t i) const { return {a.data() + i * cols, cols}; }
    std::span<double> row(std::size_t i) { return {a.data() + i * cols, cols}; }

    static MatX identity(std::size_t n) {
        MatX m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

inline MatX transpose(const MatX& m) {
    MatX t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline MatX matmul(const MatX& x, const MatX& y) {
    if (x.cols != y.rows) throw shape_error("matmul: inner dimensions differ");
    MatX r(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t k = 0; k < x.cols; ++k) {
            const double xv = x(i, k);
            if (xv == 0.0) continue;
            const double* yr = y.a.data() + k * y.cols;
            double* rr = r.a.data() + i * r.cols;
            for (std::size_t j = 0; j < y.cols; ++j) rr[j] += xv * yr[j];
        }
    }
    return r;
}

inline VecX matvec(const MatX& m, std::span<const double> v) {
    if (m.cols != v.size()) throw shape_error("matvec: dimension mismatch");
    VecX r(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.a.data() + i * m.cols;
        double s = 0;
        for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * v[j];
        r[i] = s;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

inline double dot(std::span<const double> x, std::span<const double> y) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

inline double norm_sq(std::span<const double> x) { return dot(x, x); }

inline double norm_inf(std::span<const double> x) {
    double m = 0;
    for (double v : x) m = std::max(m, std::abs(v));
    return m;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::span<double> x, double alpha) {
    for (double& v : x) v *= alpha;
}

inline VecX sub(std::span<const double> x, std::span<const double> y) {
    VecX r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] - y[i];
    return r;
}

inline double frobenius_norm(const MatX& m) { return norm2(m.a); }

}  // namespace equidiag
