#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fedcctr/errors.hpp"
#include "fedcctr/rng.hpp"

namespace fedcctr::nn {

// Dense row-major matrix of doubles. Vectors are represented as 1xN matrices.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(size_t(r) * c, fill) {}

    double& operator()(int i, int j) { return data[size_t(i) * cols + j]; }
    double operator()(int i, int j) const { return data[size_t(i) * cols + j]; }

    double* row(int i) { return data.data() + size_t(i) * cols; }
    const double* row(int i) const { return data.data() + size_t(i) * cols; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rs) {
        Matrix m(int(rs.size()), rs.size() ? int(rs.begin()->size()) : 0);
        int i = 0;
        for (const auto& r : rs) {
            int j = 0;
            for (double v : r) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    void fill_gaussian(Rng& rng, double scale) {
        for (double& v : data) v = rng.gaussian() * scale;
    }

    // Xavier/Glorot uniform over (fan_in, fan_out) = (rows, cols)
    void init_xavier(Rng& rng) {
        const double lim = std::sqrt(6.0 / double(rows + cols));
        for (double& v : data) v = (rng.uniform() * 2.0 - 1.0) * lim;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void check_shape(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    check_shape(a.cols == b.rows, "matmul inner dims " + std::to_string(a.cols) + " vs " + std::to_string(b.rows));
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* outr = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ar[k];
            if (aik == 0.0) continue;
            const double* br = b.row(k);
            for (int j = 0; j < b.cols; ++j) outr[j] += aik * br[j];
        }
    }
    return out;
}

// a^T * b without materializing the transpose
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_shape(a.rows == b.rows, "matmul_tn row dims");
    Matrix out(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* ar = a.row(k);
        const double* br = b.row(k);
        for (int i = 0; i < a.cols; ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            double* outr = out.row(i);
            for (int j = 0; j < b.cols; ++j) outr[j] += aki * br[j];
        }
    }
    return out;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_shape(a.cols == b.cols, "matmul_nt col dims");
    Matrix out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* outr = out.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            outr[j] = s;
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "add shapes");
    Matrix out = a;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "add shapes");
    for (size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

inline void axpy(Matrix& a, double alpha, const Matrix& b) {
    check_shape(a.same_shape(b), "axpy shapes");
    for (size_t i = 0; i < a.size(); ++i) a.data[i] += alpha * b.data[i];
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (double& v : out.data) v *= s;
    return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "hadamard shapes");
    Matrix out = a;
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

// column sums as a 1xC matrix (bias gradients)
inline Matrix colsum(const Matrix& a) {
    Matrix out(1, a.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        for (int j = 0; j < a.cols; ++j) out.data[j] += ar[j];
    }
    return out;
}

inline double dot(const Matrix& a, const Matrix& b) {
    check_shape(a.size() == b.size(), "dot lengths");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double norm2(const Matrix& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    check_shape(a.same_shape(b), "diff shapes");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace fedcctr::nn
