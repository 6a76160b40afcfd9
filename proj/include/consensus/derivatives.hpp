#pragma once

// Gradient and Hessian-vector drivers over loss callables of the form
//
//     [&](auto& tape, const auto& params) { ...; return loss_var; }
//
// The callable is instantiated for Tape<double> (gradients, finite-difference HVPs) and for
// Tape<Dual> (exact HVPs by forward-over-reverse).

#include <cmath>
#include <limits>

#include "consensus/params.hpp"

namespace consensus {

struct GradResult {
    double loss = 0.0;
    Vector gradient;
    /// False when the loss or any gradient entry is NaN/Inf.
    bool finite = true;
};

struct HvpResult {
    Vector hv;
    bool finite = true;
};

/// Loss value only, without recording adjoints.
template <typename LossFn>
double loss_value(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta) {
    ad::Tape<double> tape;
    Bound<double> params(tape, store, theta, false);
    return loss_fn(tape, params).value()(0, 0);
}

template <typename LossFn>
GradResult grad(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta) {
    ad::Tape<double> tape;
    Bound<double> params(tape, store, theta);
    ad::Var<double> loss = loss_fn(tape, params);
    GradResult out;
    out.loss = loss.value()(0, 0);
    if (!std::isfinite(out.loss)) {
        out.gradient = Vector::Constant(store.size(), std::numeric_limits<double>::quiet_NaN());
        out.finite = false;
        return out;
    }
    tape.backward(loss);
    out.gradient = params.gradient();
    out.finite = out.gradient.allFinite();
    return out;
}

/// ‖v‖·[∇L(θ + εv̂) − ∇L(θ − εv̂)] / (2ε) with v̂ = v/‖v‖, so ε is a step length in parameter
/// space whatever the scale of v. Equals the unscaled central difference for unit v.
template <typename LossFn>
HvpResult hvp_fd(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta, const Vector& v,
                 double eps = 1e-4) {
    if (!(eps > 0.0)) throw ParameterError("hvp_fd: eps must be positive");
    if (v.size() != theta.size()) throw DimensionError("hvp_fd: direction length mismatch");
    if (!v.allFinite()) throw ParameterError("hvp_fd: direction must be finite");
    const double norm = v.norm();
    HvpResult out;
    if (norm == 0.0) {
        out.hv = Vector::Zero(v.size());
        out.finite = true;
        return out;
    }
    const Vector step = (eps / norm) * v;
    const GradResult plus = grad(loss_fn, store, theta + step);
    const GradResult minus = grad(loss_fn, store, theta - step);
    out.hv = (plus.gradient - minus.gradient) * (norm / (2.0 * eps));
    out.finite = plus.finite && minus.finite && out.hv.allFinite();
    return out;
}

/// Exact Hv: the gradient computation runs on Dual numbers with parameter tangents set to v, so
/// the tangent of the gradient is the directional derivative of ∇L along v.
template <typename LossFn>
HvpResult hvp_exact(const LossFn& loss_fn, const ParameterStore& store, const Vector& theta, const Vector& v) {
    if (v.size() != theta.size()) throw DimensionError("hvp_exact: direction length mismatch");
    VectorT<Dual> seeded(theta.size());
    for (Index i = 0; i < theta.size(); ++i) seeded(i) = Dual(theta(i), v(i));
    ad::Tape<Dual> tape;
    Bound<Dual> params(tape, store, seeded);
    ad::Var<Dual> loss = loss_fn(tape, params);
    tape.backward(loss);
    const VectorT<Dual> g = params.gradient();
    HvpResult out;
    out.hv.resize(g.size());
    for (Index i = 0; i < g.size(); ++i) out.hv(i) = g(i).t;
    out.finite = out.hv.allFinite() && std::isfinite(loss.value()(0, 0).v);
    return out;
}

}  // namespace consensus
