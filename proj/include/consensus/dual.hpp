#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <type_traits>

namespace consensus {

/// First-order forward-mode number: value + tangent·ε with ε² = 0.
///
/// Running the reverse-mode tape with this scalar and seeding the parameter tangents with v
/// produces gradients whose tangent parts are the Hessian-vector product Hv.
struct Dual {
    double v = 0.0;
    double t = 0.0;

    constexpr Dual() = default;
    constexpr Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
    constexpr Dual(double value, double tangent) : v(value), t(tangent) {}

    Dual& operator+=(const Dual& o) { v += o.v; t += o.t; return *this; }
    Dual& operator-=(const Dual& o) { v -= o.v; t -= o.t; return *this; }
    Dual& operator*=(const Dual& o) { t = t * o.v + v * o.t; v *= o.v; return *this; }
    Dual& operator/=(const Dual& o) {
        t = (t * o.v - v * o.t) / (o.v * o.v);
        v /= o.v;
        return *this;
    }
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.t}; }
inline Dual operator+(const Dual& a) { return a; }

inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
inline bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
inline bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
inline bool operator==(const Dual& a, const Dual& b) { return a.v == b.v && a.t == b.t; }
inline bool operator!=(const Dual& a, const Dual& b) { return !(a == b); }

inline Dual exp(const Dual& a) {
    const double e = std::exp(a.v);
    return {e, e * a.t};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.t / a.v}; }
inline Dual log1p(const Dual& a) { return {std::log1p(a.v), a.t / (1.0 + a.v)}; }
inline Dual sqrt(const Dual& a) {
    const double s = std::sqrt(a.v);
    return {s, a.t / (2.0 * s)};
}
inline Dual tanh(const Dual& a) {
    const double th = std::tanh(a.v);
    return {th, (1.0 - th * th) * a.t};
}
inline Dual abs(const Dual& a) { return a.v < 0 ? -a : a; }
inline bool isfinite(const Dual& a) { return std::isfinite(a.v) && std::isfinite(a.t); }

template <typename S>
struct is_dual : std::false_type {};
template <>
struct is_dual<Dual> : std::true_type {};
template <typename S>
inline constexpr bool is_dual_v = is_dual<S>::value;

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }
inline double tangent_of(double) { return 0.0; }
inline double tangent_of(const Dual& x) { return x.t; }

}  // namespace consensus

namespace Eigen {

template <>
struct NumTraits<consensus::Dual> : NumTraits<double> {
    using Real = consensus::Dual;
    using NonInteger = consensus::Dual;
    using Nested = consensus::Dual;
    using Literal = consensus::Dual;
    enum {
        IsComplex = 0,
        IsInteger = 0,
        IsSigned = 1,
        RequireInitialization = 1,
        ReadCost = 2,
        AddCost = 2,
        MulCost = 4
    };
    static inline Real epsilon() { return Real(std::numeric_limits<double>::epsilon()); }
    static inline Real dummy_precision() { return Real(1e-12); }
    static inline Real highest() { return Real(std::numeric_limits<double>::max()); }
    static inline Real lowest() { return Real(std::numeric_limits<double>::lowest()); }
    static inline int digits10() { return std::numeric_limits<double>::digits10; }
};

}  // namespace Eigen
