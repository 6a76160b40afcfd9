#pragma once

#include <iosfwd>
#include <vector>

#include "consensus/graph.hpp"

namespace consensus {

/// Graph signal: one row per node, one column per signal coordinate (d = 1 for scalar signals).
using Signal = Matrix;

/// ½ Σ_ij W_ij (u_i - u_j)² for a scalar signal. Equals uᵀLu when in- and out-degrees agree.
double energy(const Graph& g, const Signal& u);
/// ½ Σ_(i,j) (u_i - u_j)ᵀ W_ij (u_i - u_j) for a vector-valued signal (n x d).
double energy(const BlockGraph& g, const Signal& u);

/// 2 L_sym u.
Signal energy_gradient(const Graph& g, const Signal& u);

/// (I - 2η L_sym) u, applied column-wise.
Signal filter_step(const Graph& g, const Signal& u, double eta);
Signal filter_step(const BlockGraph& g, const Signal& u, double eta);

/// 1 / (2 λ_max(L_sym)); throws DegenerateSpectrumError when λ_max = 0.
double non_oscillation_threshold(const Graph& g);
double non_oscillation_threshold(const BlockGraph& g);

struct FilterReport {
    Index iterations = 0;
    Signal final_signal;
    /// Entry k holds the value after k filter steps (entry 0 is the input).
    std::vector<double> distance_to_mean;
    std::vector<double> energy;
    std::vector<double> bound;
    /// max_{i>=1} |1 - 2ηλ_i|; equals ω₁ in the non-oscillating regime.
    double rate_bound = 0.0;
    bool oscillatory = false;
};

/// Repeated filtering of a scalar signal on a connected graph with per-step diagnostics.
FilterReport filter_iterate(const Graph& g, const Signal& u, double eta, Index steps);

/// Columns: step, distance_to_mean, energy, bound.
void write_filter_report_csv(std::ostream& out, const FilterReport& report);

/// (I + ρL)⁻¹ x by Cholesky; requires an undirected graph.
Signal laplacian_smoothing(const Graph& g, const Signal& x, double rho);

/// v₀v₀ᵀu: each column replaced by its mean.
Signal mean_projection(const Signal& u);

}  // namespace consensus
