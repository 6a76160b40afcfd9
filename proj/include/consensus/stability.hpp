#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "consensus/derivatives.hpp"
#include "consensus/train.hpp"

namespace consensus {

enum class HvpMode { exact, finite_difference };
enum class AlphaClass { zero, finite, infinite };

std::string to_string(HvpMode m);
std::string to_string(AlphaClass c);
/// Accepts "exact" and "fd" / "finite-difference"; throws ConfigurationError otherwise.
HvpMode parse_hvp_mode(const std::string& s);

struct AlphaMaxRecord {
    Index step = 0;
    double gdotu = 0.0;
    double uHu = 0.0;
    double alpha_max = 0.0;
    AlphaClass classification = AlphaClass::zero;
    /// False when the gradient or the curvature was non-finite.
    bool valid = true;
};

/// zero if gdotu > 0; infinite if gdotu <= 0 and uHu <= 0; otherwise finite with
/// alpha_max = -2 gdotu / uHu.
AlphaMaxRecord classify_alpha_max(double gdotu, double uHu, Index step = 0);

/// Hu by the selected estimator.
template <typename LossFn>
HvpResult hvp(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta, const Vector& u, HvpMode mode,
              double eps = 1e-4) {
    return mode == HvpMode::exact ? hvp_exact(loss_fn, store, theta, u) : hvp_fd(loss_fn, store, theta, u, eps);
}

/// Directional maximum stable step along u at theta.
template <typename LossFn>
AlphaMaxRecord alpha_max(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta, const Vector& u,
                         HvpMode mode, double eps = 1e-4) {
    if (u.size() != theta.size()) throw DimensionError("alpha_max: direction length mismatch");
    if (!u.allFinite() || u.squaredNorm() == 0.0) throw ParameterError("alpha_max: direction must be finite and nonzero");
    const GradResult g = grad(loss_fn, store, theta);
    const HvpResult h = hvp(loss_fn, store, theta, u, mode, eps);
    AlphaMaxRecord r = classify_alpha_max(g.gradient.dot(u), u.dot(h.hv));
    r.valid = g.finite && h.finite;
    return r;
}

struct SgdBoundCheck {
    double alpha_max = 0.0;
    AlphaClass classification = AlphaClass::zero;
    /// 2 / max |eigenvalue| of the assembled Hessian.
    double two_over_specnorm = 0.0;
};

/// α_max along u = -∇L next to 2/‖∇²L‖₂, the Hessian assembled column by column from exact HVPs.
template <typename LossFn>
SgdBoundCheck sgd_alpha_max_bound_check(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta) {
    const Index n = theta.size();
    Matrix H(n, n);
    for (Index i = 0; i < n; ++i) H.col(i) = hvp_exact(loss_fn, store, theta, Vector::Unit(n, i)).hv;
    const Matrix Hs = 0.5 * (H + H.transpose());
    const Vector ev = sym_eig(Hs).eigenvalues;
    const double norm = std::max(std::abs(ev(0)), std::abs(ev(n - 1)));
    const Vector g = grad(loss_fn, store, theta).gradient;
    const AlphaMaxRecord r = classify_alpha_max(-g.squaredNorm(), g.dot(Hs * g));
    return {r.alpha_max, r.classification, norm > 0.0 ? 2.0 / norm : std::numeric_limits<double>::infinity()};
}

// --- probe protocol --------------------------------------------------------------------------

struct ProbeConfig {
    Index warmup_batches = 5;
    Index warmup_steps = 5;
    Index probe_steps = 25;
    Index batch_size = 64;
    double lr = 1e-3;
    double clip_norm = 1.0;
    double weight_decay = 1e-2;
    double mask_rate = 0.3;
    HvpMode mode = HvpMode::finite_difference;
    double eps = 1e-4;
    std::uint64_t seed = 0;
};

/// Table marker for a median over an empty set (U+2014).
inline constexpr const char* kNoFiniteMarker = "\xE2\x80\x94";

struct ProbeReport {
    std::vector<AlphaMaxRecord> records;
    double training_lr = 0.0;
    HvpMode mode = HvpMode::finite_difference;

    /// Median over records that are not infinite; +inf when there are none.
    double median_alpha_max() const;
    /// Percentage of all records with alpha_max > training_lr.
    double percent_stable() const;
    /// True when every record is infinite (the median is then printed as kNoFiniteMarker).
    bool all_infinite() const;
};

/// Warmup over `warmup_batches` batches without stepping (m, v = mean g, mean g²), then
/// `warmup_steps` AdamW steps whose bias correction starts at t = warmup_batches + 1, then
/// `probe_steps` recorded steps. Gradients are clipped before use; u is the applied AdamW update
/// (decay included) divided by the learning rate, so alpha_max is on the learning-rate scale.
ProbeReport probe(const Model& model, const Vector& theta, const Corpus& corpus, const ProbeConfig& cfg);

/// Columns: step,gdotu,uHu,alpha_max,classification.
void write_probe_csv(std::ostream& os, const ProbeReport& report);
/// {median_alpha_max, percent_stable, training_lr, hvp_mode}; the median is kNoFiniteMarker when
/// no record is finite or zero.
std::string probe_summary_json(const ProbeReport& report);

}  // namespace consensus
