#pragma once

// Independent reference computations used only by tests.

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "consensus/graph.hpp"
#include "consensus/tensor.hpp"

namespace oracle {

using consensus::Index;
using consensus::Matrix;
using consensus::Vector;

/// Eigenvalues from Eigen's tridiagonal QR solver (different algorithm from the library's Jacobi).
inline Vector eigenvalues(const Matrix& a) {
    Eigen::MatrixXd s = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
    return es.eigenvalues();
}

/// Determinant by cofactor expansion along the first row.
inline double determinant(const Matrix& a) {
    const Index n = a.rows();
    if (n == 1) return a(0, 0);
    if (n == 2) return a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
    double det = 0.0;
    for (Index c = 0; c < n; ++c) {
        Matrix minor(n - 1, n - 1);
        for (Index i = 1; i < n; ++i) {
            Index cc = 0;
            for (Index j = 0; j < n; ++j) {
                if (j == c) continue;
                minor(i - 1, cc++) = a(i, j);
            }
        }
        det += ((c % 2 == 0) ? 1.0 : -1.0) * a(0, c) * determinant(minor);
    }
    return det;
}

/// Triple-loop product.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix c = Matrix::Zero(a.rows(), b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index k = 0; k < a.cols(); ++k)
            for (Index j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
    return c;
}

/// Laplacian assembled edge by edge from the definition D - W (self-loops skipped).
inline Matrix laplacian_from_edges(Index n, const std::vector<consensus::Edge>& edges) {
    Matrix L = Matrix::Zero(n, n);
    for (const auto& e : edges) {
        if (e.src == e.dst) continue;
        L(e.src, e.src) += e.weight;
        L(e.src, e.dst) -= e.weight;
    }
    return L;
}

/// λ₁ of the symmetrised Laplacian via the oracle eigensolver.
inline double fiedler(Index n, const std::vector<consensus::Edge>& edges) {
    const Matrix L = laplacian_from_edges(n, edges);
    return eigenvalues(0.5 * (L + L.transpose()))(1);
}

/// Central-difference gradient of f with per-coordinate step h·max(1, |x_i|).
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5) {
    Vector g(x.size());
    Vector xp = x;
    for (Index i = 0; i < x.size(); ++i) {
        const double step = h * std::max(1.0, std::abs(x(i)));
        xp(i) = x(i) + step;
        const double fp = f(xp);
        xp(i) = x(i) - step;
        const double fm = f(xp);
        xp(i) = x(i);
        g(i) = (fp - fm) / (2.0 * step);
    }
    return g;
}

/// max_i |a_i - b_i| / max(scale_floor, max_i |b_i|).
inline double rel_error(const Vector& a, const Vector& b, double scale_floor = 1e-8) {
    const double scale = std::max(scale_floor, b.cwiseAbs().maxCoeff());
    return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline Matrix random_matrix(consensus::Rng& rng, Index r, Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

inline Matrix random_symmetric(consensus::Rng& rng, Index n) {
    Matrix m = random_matrix(rng, n, n);
    return 0.5 * (m + m.transpose());
}

inline Matrix random_spd(consensus::Rng& rng, Index n, double shift = 0.5) {
    Matrix m = random_matrix(rng, n, n);
    return m * m.transpose() / static_cast<double>(n) + shift * Matrix::Identity(n, n);
}

}  // namespace oracle
