#include "consensus/filter.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "consensus/csv.hpp"

namespace consensus {

namespace {

void require_rows(const Graph& g, const Signal& u) {
    if (u.rows() != g.n())
        throw DimensionError("signal has " + std::to_string(u.rows()) + " rows, graph has " +
                             std::to_string(g.n()) + " nodes");
}

void require_block(const BlockGraph& g, const Signal& u) {
    if (u.rows() != g.n() || u.cols() != g.d()) throw DimensionError("signal shape does not match block graph");
}

Vector flatten(const Signal& u) { return Eigen::Map<const Vector>(u.data(), u.size()); }

}  // namespace

double energy(const Graph& g, const Signal& u) {
    require_rows(g, u);
    if (u.cols() != 1) throw DimensionError("energy expects a scalar signal (d = 1)");
    double sum = 0.0;
    for (const auto& e : g.edges()) {
        const double diff = u(e.src, 0) - u(e.dst, 0);
        sum += e.weight * diff * diff;
    }
    return 0.5 * sum;
}

double energy(const BlockGraph& g, const Signal& u) {
    require_block(g, u);
    double sum = 0.0;
    for (const auto& e : g.edges()) {
        const Vector diff = (u.row(e.src) - u.row(e.dst)).transpose();
        sum += diff.dot(e.block * diff);
    }
    return 0.5 * sum;
}

Signal energy_gradient(const Graph& g, const Signal& u) {
    require_rows(g, u);
    if (u.cols() != 1) throw DimensionError("energy_gradient expects a scalar signal (d = 1)");
    return 2.0 * laplacians(g).L_sym * u;
}

Signal filter_step(const Graph& g, const Signal& u, double eta) {
    require_rows(g, u);
    if (eta < 0.0) throw ParameterError("filter step size must be non-negative");
    const Matrix& L_sym = laplacians(g).L_sym;
    return u - 2.0 * eta * (L_sym * u);
}

Signal filter_step(const BlockGraph& g, const Signal& u, double eta) {
    require_block(g, u);
    if (eta < 0.0) throw ParameterError("filter step size must be non-negative");
    const Vector flat = flatten(u);
    const Vector next = flat - 2.0 * eta * (block_laplacian(g).L_sym * flat);
    return Eigen::Map<const Signal>(next.data(), u.rows(), u.cols());
}

double non_oscillation_threshold(const Graph& g) {
    if (g.edge_count() == 0) throw DegenerateSpectrumError("non-oscillation threshold undefined: graph has no edges");
    const Vector ev = sym_eigenvalues(laplacians(g).L_sym);
    const double lmax = ev(ev.size() - 1);
    if (lmax <= 0.0) throw DegenerateSpectrumError("non-oscillation threshold undefined: λ_max = 0");
    return 1.0 / (2.0 * lmax);
}

double non_oscillation_threshold(const BlockGraph& g) {
    if (g.edges().empty()) throw DegenerateSpectrumError("non-oscillation threshold undefined: graph has no edges");
    const Vector ev = sym_eigenvalues(block_laplacian(g).L_sym);
    const double lmax = ev(ev.size() - 1);
    if (lmax <= 0.0) throw DegenerateSpectrumError("non-oscillation threshold undefined: λ_max = 0");
    return 1.0 / (2.0 * lmax);
}

Signal mean_projection(const Signal& u) {
    Signal out(u.rows(), u.cols());
    for (Index c = 0; c < u.cols(); ++c) out.col(c).setConstant(u.col(c).mean());
    return out;
}

FilterReport filter_iterate(const Graph& g, const Signal& u, double eta, Index steps) {
    require_rows(g, u);
    if (!g.connected())
        throw ParameterError("filter_iterate: graph is disconnected, convergence to the mean is not guaranteed");
    if (steps < 0) throw ParameterError("filter_iterate: negative step count");

    const Matrix L_sym = laplacians(g).L_sym;
    const Vector ev = sym_eigenvalues(L_sym);
    FilterReport report;
    report.iterations = steps;
    report.oscillatory = eta > non_oscillation_threshold(g);
    for (Index i = 1; i < ev.size(); ++i)
        report.rate_bound = std::max(report.rate_bound, std::abs(1.0 - 2.0 * eta * ev(i)));

    const Matrix H = Matrix::Identity(g.n(), g.n()) - 2.0 * eta * L_sym;
    const Signal limit = mean_projection(u);
    const double norm_u = u.norm();
    Signal current = u;
    auto record = [&](Index step) {
        report.distance_to_mean.push_back((current - limit).norm());
        report.energy.push_back(u.cols() == 1 ? energy(g, current) : 0.0);
        report.bound.push_back(std::pow(report.rate_bound, static_cast<double>(step)) * norm_u);
    };
    record(0);
    for (Index step = 1; step <= steps; ++step) {
        current = H * current;
        record(step);
    }
    report.final_signal = std::move(current);
    return report;
}

void write_filter_report_csv(std::ostream& out, const FilterReport& report) {
    CsvWriter csv(out);
    csv.header({"step", "distance_to_mean", "energy", "bound"});
    for (std::size_t k = 0; k < report.distance_to_mean.size(); ++k)
        csv.row(static_cast<long long>(k), report.distance_to_mean[k], report.energy[k], report.bound[k]);
}

Signal laplacian_smoothing(const Graph& g, const Signal& x, double rho) {
    require_rows(g, x);
    if (rho < 0.0) throw ParameterError("laplacian_smoothing: rho must be non-negative");
    const Matrix L = laplacians(g).L;
    if (max_abs(L - L.transpose()) > 0.0) throw SymmetryError("laplacian_smoothing requires an undirected graph");
    const Matrix a = Matrix::Identity(g.n(), g.n()) + rho * L;
    return solve_spd(a, x);
}

}  // namespace consensus
