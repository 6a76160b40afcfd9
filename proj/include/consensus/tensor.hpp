#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string_view>

#include "consensus/errors.hpp"

namespace consensus {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Index = Eigen::Index;

/// Eigenpairs of a symmetric matrix. Eigenvalues ascend; column k of `eigenvectors` pairs with
/// `eigenvalues(k)`.
struct EigenDecomposition {
    Vector eigenvalues;
    Matrix eigenvectors;
};

struct JacobiOptions {
    int max_sweeps = 100;
    /// Stop once the off-diagonal Frobenius norm is below tolerance * max(1, ||A||_F).
    double tolerance = 1e-12;
};

/// Cyclic Jacobi eigensolver. The input is symmetrized as (A + A^T)/2 before iterating.
EigenDecomposition sym_eig(const Matrix& a, const JacobiOptions& options = {});

/// Convenience wrapper returning the ascending eigenvalues only.
Vector sym_eigenvalues(const Matrix& a, const JacobiOptions& options = {});

Matrix matmul(const Matrix& a, const Matrix& b);

/// Solves a x = b for symmetric positive-definite a by Cholesky factorisation.
Matrix solve_spd(const Matrix& a, const Matrix& b);

inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

/// Deterministic, splittable random stream (SplitMix64 over a 64-bit counter).
///
/// Uniform and normal draws are derived from the raw 64-bit output with fixed formulas, so a
/// given seed produces the same doubles on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    /// Independent substream keyed by name; does not advance this stream.
    Rng split(std::string_view name) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace consensus
