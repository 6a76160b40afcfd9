#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape<S> records every operation as a node holding its value and a backward closure; calling
// backward() on a 1x1 node walks the nodes in reverse creation order (a valid reverse topological
// order, since inputs always exist before outputs). All kernels are written for a generic scalar
// S, so the same model code runs on double (gradients) and on Dual (Hessian-vector products).

#include <cmath>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "consensus/dual.hpp"
#include "consensus/tensor.hpp"

namespace consensus::ad {

template <typename S>
class Tape;

/// Handle to a node on a tape.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const MatrixT<S>& value() const { return tape->value(*this); }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
};

namespace detail {

inline Matrix values(const MatrixT<Dual>& m) {
    Matrix out(m.rows(), m.cols());
    for (Index k = 0; k < m.size(); ++k) out.data()[k] = m.data()[k].v;
    return out;
}

inline Matrix tangents(const MatrixT<Dual>& m) {
    Matrix out(m.rows(), m.cols());
    for (Index k = 0; k < m.size(); ++k) out.data()[k] = m.data()[k].t;
    return out;
}

inline MatrixT<Dual> join(const Matrix& v, const Matrix& t) {
    MatrixT<Dual> out(v.rows(), v.cols());
    for (Index k = 0; k < v.size(); ++k) out.data()[k] = Dual(v.data()[k], t.data()[k]);
    return out;
}

template <typename M>
M product(const M& a, bool ta, const M& b, bool tb) {
    if (!ta && !tb) return a * b;
    if (!ta && tb) return a * b.transpose();
    if (ta && !tb) return a.transpose() * b;
    return a.transpose() * b.transpose();
}

/// op(a) * op(b). Dual products are split into three real products so they run on the
/// vectorised double kernels.
template <typename S>
MatrixT<S> gemm(const MatrixT<S>& a, bool ta, const MatrixT<S>& b, bool tb) {
    if constexpr (is_dual_v<S>) {
        const Matrix av = values(a), at = tangents(a), bv = values(b), bt = tangents(b);
        Matrix pv = product(av, ta, bv, tb);
        Matrix pt = product(at, ta, bv, tb) + product(av, ta, bt, tb);
        return join(pv, pt);
    } else {
        return product(a, ta, b, tb);
    }
}

inline void require(bool ok, const char* op, const std::string& detail) {
    if (!ok) throw DimensionError(std::string(op) + ": " + detail);
}

inline std::string shape(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

/// tanh through a single exp; libm's tanh is several times slower and dominates GELU.
inline double tanh_of(double z) {
    const double e = std::exp(-2.0 * std::abs(z));
    const double r = (1.0 - e) / (1.0 + e);
    return z < 0.0 ? -r : r;
}
inline Dual tanh_of(const Dual& z) { return tanh(z); }

}  // namespace detail

template <typename S>
class Tape {
public:
    using Mat = MatrixT<S>;
    using Backward = std::function<void(Tape&, const Mat&)>;

    Tape() { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<S> leaf(Mat value, bool needs_grad = true) { return push(std::move(value), needs_grad, nullptr); }
    Var<S> constant(Mat value) { return push(std::move(value), false, nullptr); }

    const Mat& value(Var<S> v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    bool needs_grad(Var<S> v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

    /// Adjoint accumulated by the last backward(); zeros when the node was not reached.
    Mat grad(Var<S> v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a 1x1 node.
    void backward(Var<S> out) {
        detail::require(value(out).size() == 1, "backward", "output must be 1x1");
        for (auto& n : nodes_) n.grad.resize(0, 0);
        nodes_[static_cast<std::size_t>(out.id)].grad = Mat::Constant(1, 1, S(1.0));
        for (int id = out.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.back || n.grad.size() == 0) continue;
            n.back(*this, n.grad);
            n.grad.resize(0, 0);  // interior adjoints are no longer needed
        }
    }

    Var<S> push(Mat value, bool needs_grad, Backward back) {
        nodes_.push_back(Node{std::move(value), Mat(), needs_grad, needs_grad ? std::move(back) : Backward()});
        return Var<S>{this, static_cast<int>(nodes_.size() - 1)};
    }

    template <typename Expr>
    void accumulate(Var<S> v, const Expr& g) {
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        Backward back;
    };
    std::vector<Node> nodes_;
};

template <typename S>
Var<S> make(std::initializer_list<Var<S>> inputs, MatrixT<S> value, typename Tape<S>::Backward back) {
    Tape<S>* tape = inputs.begin()->tape;
    bool needs = false;
    for (const auto& v : inputs) needs = needs || tape->needs_grad(v);
    return tape->push(std::move(value), needs, std::move(back));
}

template <typename S>
Var<S> make(const std::vector<Var<S>>& inputs, MatrixT<S> value, typename Tape<S>::Backward back) {
    Tape<S>* tape = inputs.front().tape;
    bool needs = false;
    for (const auto& v : inputs) needs = needs || tape->needs_grad(v);
    return tape->push(std::move(value), needs, std::move(back));
}

// ---------------------------------------------------------------------------------------------
// Elementwise arithmetic

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add",
                    detail::shape(a.rows(), a.cols()) + " vs " + detail::shape(b.rows(), b.cols()));
    return make<S>({a, b}, a.value() + b.value(), [a, b](Tape<S>& t, const MatrixT<S>& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub",
                    detail::shape(a.rows(), a.cols()) + " vs " + detail::shape(b.rows(), b.cols()));
    return make<S>({a, b}, a.value() - b.value(), [a, b](Tape<S>& t, const MatrixT<S>& g) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul", "shape mismatch");
    return make<S>({a, b}, a.value().cwiseProduct(b.value()), [a, b](Tape<S>& t, const MatrixT<S>& g) {
        if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
        if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

template <typename S>
Var<S> scale(Var<S> a, double c) {
    return make<S>({a}, a.value() * S(c), [a, c](Tape<S>& t, const MatrixT<S>& g) { t.accumulate(a, g * S(c)); });
}

/// a (N x k) + 1 bᵀ for a 1 x k row b.
template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
    detail::require(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec",
                    detail::shape(a.rows(), a.cols()) + " + " + detail::shape(b.rows(), b.cols()));
    MatrixT<S> out = a.value();
    out.rowwise() += b.value().row(0);
    return make<S>({a, b}, std::move(out), [a, b](Tape<S>& t, const MatrixT<S>& g) {
        t.accumulate(a, g);
        if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
    });
}

/// a (N x k) scaled row-wise by c (N x 1).
template <typename S>
Var<S> mul_colvec(Var<S> a, Var<S> c) {
    detail::require(c.cols() == 1 && c.rows() == a.rows(), "mul_colvec", "column vector length mismatch");
    MatrixT<S> out = a.value();
    for (Index i = 0; i < out.rows(); ++i) out.row(i) *= c.value()(i, 0);
    return make<S>({a, c}, std::move(out), [a, c](Tape<S>& t, const MatrixT<S>& g) {
        if (t.needs_grad(a)) {
            MatrixT<S> ga = g;
            for (Index i = 0; i < ga.rows(); ++i) ga.row(i) *= c.value()(i, 0);
            t.accumulate(a, ga);
        }
        if (t.needs_grad(c)) t.accumulate(c, g.cwiseProduct(a.value()).rowwise().sum());
    });
}

/// Row-wise inner products: out(i) = <a_i, b_i>.
template <typename S>
Var<S> rowdot(Var<S> a, Var<S> b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "rowdot", "shape mismatch");
    MatrixT<S> out = a.value().cwiseProduct(b.value()).rowwise().sum();
    return make<S>({a, b}, std::move(out), [a, b](Tape<S>& t, const MatrixT<S>& g) {
        if (t.needs_grad(a)) {
            MatrixT<S> ga = b.value();
            for (Index i = 0; i < ga.rows(); ++i) ga.row(i) *= g(i, 0);
            t.accumulate(a, ga);
        }
        if (t.needs_grad(b)) {
            MatrixT<S> gb = a.value();
            for (Index i = 0; i < gb.rows(); ++i) gb.row(i) *= g(i, 0);
            t.accumulate(b, gb);
        }
    });
}

/// Adds a constant additive mask. This is the band-mask step of sliding-window attention; it
/// deliberately has no second-order adjoint, so exact Hessian-vector products refuse it.
template <typename S>
Var<S> add_mask(Var<S> a, const Matrix& mask) {
    if constexpr (is_dual_v<S>) {
        throw CapabilityError("add_mask: band-masked logits do not support exact second derivatives");
    } else {
        detail::require(mask.rows() == a.rows() && mask.cols() == a.cols(), "add_mask", "shape mismatch");
        return make<S>({a}, a.value() + mask, [a](Tape<S>& t, const MatrixT<S>& g) { t.accumulate(a, g); });
    }
}

// ---------------------------------------------------------------------------------------------
// Products

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    detail::require(a.cols() == b.rows(), "matmul",
                    detail::shape(a.rows(), a.cols()) + " * " + detail::shape(b.rows(), b.cols()));
    return make<S>({a, b}, detail::gemm<S>(a.value(), false, b.value(), false),
                   [a, b](Tape<S>& t, const MatrixT<S>& g) {
                       if (t.needs_grad(a)) t.accumulate(a, detail::gemm<S>(g, false, b.value(), true));
                       if (t.needs_grad(b)) t.accumulate(b, detail::gemm<S>(a.value(), true, g, false));
                   });
}

/// a bᵀ; the layout used for `x Wᵀ` projections with W stored as (out x in).
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
    detail::require(a.cols() == b.cols(), "matmul_nt",
                    detail::shape(a.rows(), a.cols()) + " * " + detail::shape(b.rows(), b.cols()) + "^T");
    return make<S>({a, b}, detail::gemm<S>(a.value(), false, b.value(), true),
                   [a, b](Tape<S>& t, const MatrixT<S>& g) {
                       if (t.needs_grad(a)) t.accumulate(a, detail::gemm<S>(g, false, b.value(), false));
                       if (t.needs_grad(b)) t.accumulate(b, detail::gemm<S>(g, true, a.value(), false));
                   });
}

/// x Wᵀ + 1 bᵀ.
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
    return add_rowvec(matmul_nt(x, w), b);
}

// ---------------------------------------------------------------------------------------------
// Nonlinearities

template <typename S>
Var<S> softplus(Var<S> a) {
    using std::exp;
    using std::log1p;
    MatrixT<S> out(a.rows(), a.cols());
    const MatrixT<S>& x = a.value();
    for (Index k = 0; k < x.size(); ++k) {
        const S v = x.data()[k];
        out.data()[k] = v > S(0.0) ? v + log1p(exp(-v)) : log1p(exp(v));
    }
    return make<S>({a}, std::move(out), [a](Tape<S>& t, const MatrixT<S>& g) {
        using std::exp;
        const MatrixT<S>& x = a.value();
        MatrixT<S> ga(x.rows(), x.cols());
        for (Index k = 0; k < x.size(); ++k) {
            const S v = x.data()[k];
            const S sig = v >= S(0.0) ? S(1.0) / (S(1.0) + exp(-v)) : exp(v) / (S(1.0) + exp(v));
            ga.data()[k] = g.data()[k] * sig;
        }
        t.accumulate(a, ga);
    });
}

/// tanh-approximated GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    const MatrixT<S>& x = a.value();
    MatrixT<S> out(x.rows(), x.cols());
    MatrixT<S> th(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
        const S v = x.data()[i];
        th.data()[i] = detail::tanh_of(S(k) * (v + S(c) * v * v * v));
        out.data()[i] = S(0.5) * v * (S(1.0) + th.data()[i]);
    }
    return make<S>({a}, std::move(out), [a, th = std::move(th)](Tape<S>& t, const MatrixT<S>& g) {
        const MatrixT<S>& x = a.value();
        MatrixT<S> ga(x.rows(), x.cols());
        for (Index i = 0; i < x.size(); ++i) {
            const S v = x.data()[i];
            const S h = th.data()[i];
            const S d = S(0.5) * (S(1.0) + h) + S(0.5) * v * (S(1.0) - h * h) * S(k) * (S(1.0) + S(3.0 * c) * v * v);
            ga.data()[i] = g.data()[i] * d;
        }
        t.accumulate(a, ga);
    });
}

/// Row-wise softmax with max subtraction.
template <typename S>
Var<S> softmax_rows(Var<S> a) {
    using std::exp;
    const MatrixT<S>& x = a.value();
    MatrixT<S> y(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        S m = x(i, 0);
        for (Index j = 1; j < x.cols(); ++j)
            if (x(i, j) > m) m = x(i, j);
        S total(0.0);
        for (Index j = 0; j < x.cols(); ++j) {
            y(i, j) = exp(x(i, j) - m);
            total += y(i, j);
        }
        for (Index j = 0; j < x.cols(); ++j) y(i, j) /= total;
    }
    MatrixT<S> y_copy = y;
    return make<S>({a}, std::move(y), [a, y = std::move(y_copy)](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gy = g.cwiseProduct(y);
        MatrixT<S> ga = gy;
        for (Index i = 0; i < y.rows(); ++i) ga.row(i) -= y.row(i) * gy.row(i).sum();
        t.accumulate(a, ga);
    });
}

/// Row-wise layer normalisation with affine 1 x k scale and shift.
template <typename S>
Var<S> layer_norm_rows(Var<S> x, Var<S> gamma, Var<S> beta, double eps = 1e-5) {
    using std::sqrt;
    detail::require(gamma.rows() == 1 && beta.rows() == 1 && gamma.cols() == x.cols() && beta.cols() == x.cols(),
                    "layer_norm_rows", "affine parameters must be 1 x k");
    const MatrixT<S>& xv = x.value();
    const Index n = xv.rows();
    const Index k = xv.cols();
    MatrixT<S> xhat(n, k);
    VectorT<S> rstd(n);
    for (Index i = 0; i < n; ++i) {
        const S mu = xv.row(i).sum() / S(static_cast<double>(k));
        S var(0.0);
        for (Index j = 0; j < k; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
        var /= S(static_cast<double>(k));
        rstd(i) = S(1.0) / sqrt(var + S(eps));
        for (Index j = 0; j < k; ++j) xhat(i, j) = (xv(i, j) - mu) * rstd(i);
    }
    MatrixT<S> y(n, k);
    for (Index i = 0; i < n; ++i) y.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
    return make<S>({x, gamma, beta}, std::move(y),
                   [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<S>& t, const MatrixT<S>& g) {
                       const Index n = g.rows();
                       const Index k = g.cols();
                       if (t.needs_grad(gamma)) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                       if (t.needs_grad(beta)) t.accumulate(beta, g.colwise().sum());
                       if (t.needs_grad(x)) {
                           MatrixT<S> gx(n, k);
                           const auto& gam = gamma.value();
                           for (Index i = 0; i < n; ++i) {
                               S mean_g(0.0), mean_gx(0.0);
                               for (Index j = 0; j < k; ++j) {
                                   const S gh = g(i, j) * gam(0, j);
                                   mean_g += gh;
                                   mean_gx += gh * xhat(i, j);
                               }
                               mean_g /= S(static_cast<double>(k));
                               mean_gx /= S(static_cast<double>(k));
                               for (Index j = 0; j < k; ++j)
                                   gx(i, j) = rstd(i) * (g(i, j) * gam(0, j) - mean_g - xhat(i, j) * mean_gx);
                           }
                           t.accumulate(x, gx);
                       }
                   });
}

// ---------------------------------------------------------------------------------------------
// Indexing and layout

/// out row k = x row idx[k].
template <typename S>
Var<S> gather_rows(Var<S> x, std::vector<Index> idx) {
    const MatrixT<S>& xv = x.value();
    MatrixT<S> out(static_cast<Index>(idx.size()), xv.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        detail::require(idx[k] >= 0 && idx[k] < xv.rows(), "gather_rows", "index out of range");
        out.row(static_cast<Index>(k)) = xv.row(idx[k]);
    }
    const Index rows = xv.rows();
    return make<S>({x}, std::move(out), [x, rows, idx = std::move(idx)](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gx = MatrixT<S>::Zero(rows, g.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) gx.row(idx[k]) += g.row(static_cast<Index>(k));
        t.accumulate(x, gx);
    });
}

/// out row idx[k] += x row k, with `rows` output rows.
template <typename S>
Var<S> scatter_add_rows(Var<S> x, std::vector<Index> idx, Index rows) {
    const MatrixT<S>& xv = x.value();
    detail::require(static_cast<Index>(idx.size()) == xv.rows(), "scatter_add_rows", "index count mismatch");
    MatrixT<S> out = MatrixT<S>::Zero(rows, xv.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        detail::require(idx[k] >= 0 && idx[k] < rows, "scatter_add_rows", "index out of range");
        out.row(idx[k]) += xv.row(static_cast<Index>(k));
    }
    return make<S>({x}, std::move(out), [x, idx = std::move(idx)](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gx(static_cast<Index>(idx.size()), g.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) gx.row(static_cast<Index>(k)) = g.row(idx[k]);
        t.accumulate(x, gx);
    });
}

template <typename S>
Var<S> slice_cols(Var<S> x, Index start, Index count) {
    detail::require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols", "range out of bounds");
    const Index rows = x.rows();
    const Index cols = x.cols();
    return make<S>({x}, x.value().middleCols(start, count), [x, start, count, rows, cols](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gx = MatrixT<S>::Zero(rows, cols);
        gx.middleCols(start, count) = g;
        t.accumulate(x, gx);
    });
}

template <typename S>
Var<S> slice_rows(Var<S> x, Index start, Index count) {
    detail::require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows", "range out of bounds");
    const Index rows = x.rows();
    const Index cols = x.cols();
    return make<S>({x}, x.value().middleRows(start, count), [x, start, count, rows, cols](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gx = MatrixT<S>::Zero(rows, cols);
        gx.middleRows(start, count) = g;
        t.accumulate(x, gx);
    });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    detail::require(!parts.empty(), "concat_cols", "no inputs");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        detail::require(p.rows() == rows, "concat_cols", "row count mismatch");
        cols += p.cols();
    }
    MatrixT<S> out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return make<S>(parts, std::move(out), [parts](Tape<S>& t, const MatrixT<S>& g) {
        Index at = 0;
        for (const auto& p : parts) {
            if (t.needs_grad(p)) t.accumulate(p, g.middleCols(at, p.cols()));
            at += p.cols();
        }
    });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    detail::require(!parts.empty(), "concat_rows", "no inputs");
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        detail::require(p.cols() == cols, "concat_rows", "column count mismatch");
        rows += p.rows();
    }
    MatrixT<S> out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make<S>(parts, std::move(out), [parts](Tape<S>& t, const MatrixT<S>& g) {
        Index at = 0;
        for (const auto& p : parts) {
            if (t.needs_grad(p)) t.accumulate(p, g.middleRows(at, p.rows()));
            at += p.rows();
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Consensus-specific kernels

/// Row norm applied to each consecutive `chunk`-wide segment of every row; zero segments pass
/// through unchanged (adjoint: identity on those segments).
template <typename S>
Var<S> row_norm_chunks(Var<S> x, Index chunk) {
    using std::sqrt;
    detail::require(chunk > 0 && x.cols() % chunk == 0, "row_norm_chunks", "width not divisible by chunk");
    const MatrixT<S>& xv = x.value();
    const Index segs = xv.cols() / chunk;
    MatrixT<S> y = xv;
    MatrixT<S> norms(xv.rows(), segs);
    for (Index i = 0; i < xv.rows(); ++i) {
        for (Index s = 0; s < segs; ++s) {
            S sq(0.0);
            for (Index j = 0; j < chunk; ++j) sq += xv(i, s * chunk + j) * xv(i, s * chunk + j);
            const S n = sq > S(0.0) ? sqrt(sq) : S(0.0);
            norms(i, s) = n;
            if (n > S(0.0))
                for (Index j = 0; j < chunk; ++j) y(i, s * chunk + j) /= n;
        }
    }
    MatrixT<S> y_copy = y;
    return make<S>({x}, std::move(y), [x, chunk, segs, norms = std::move(norms), y = std::move(y_copy)](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gx = g;
        for (Index i = 0; i < g.rows(); ++i) {
            for (Index s = 0; s < segs; ++s) {
                const S n = norms(i, s);
                if (!(n > S(0.0))) continue;
                S proj(0.0);
                for (Index j = 0; j < chunk; ++j) proj += y(i, s * chunk + j) * g(i, s * chunk + j);
                for (Index j = 0; j < chunk; ++j)
                    gx(i, s * chunk + j) = (g(i, s * chunk + j) - y(i, s * chunk + j) * proj) / n;
            }
        }
        t.accumulate(x, gx);
    });
}

/// Applies R_e = α_e I + β_e Λ_eᵀΛ_e to the row d_e of `diff` for every edge e.
///
/// `lambda` holds Λ_e row-major in each row (rank x width). Cost O(E · rank · width).
template <typename S>
Var<S> apply_edge_weights(Var<S> diff, Var<S> alpha, Var<S> beta, Var<S> lambda, Index rank) {
    const Index E = diff.rows();
    const Index w = diff.cols();
    detail::require(alpha.rows() == E && alpha.cols() == 1 && beta.rows() == E && beta.cols() == 1,
                    "apply_edge_weights", "alpha/beta must be E x 1");
    detail::require(lambda.rows() == E && lambda.cols() == rank * w, "apply_edge_weights",
                    "lambda must be E x (rank*width)");
    const MatrixT<S>& d = diff.value();
    const MatrixT<S>& lam = lambda.value();
    MatrixT<S> out(E, w);
    MatrixT<S> s(E, rank);  // Λ d per edge
    for (Index e = 0; e < E; ++e) {
        for (Index a = 0; a < rank; ++a) {
            S acc(0.0);
            for (Index b = 0; b < w; ++b) acc += lam(e, a * w + b) * d(e, b);
            s(e, a) = acc;
        }
        const S al = alpha.value()(e, 0);
        const S be = beta.value()(e, 0);
        for (Index b = 0; b < w; ++b) {
            S acc(0.0);
            for (Index a = 0; a < rank; ++a) acc += lam(e, a * w + b) * s(e, a);
            out(e, b) = al * d(e, b) + be * acc;
        }
    }
    return make<S>({diff, alpha, beta, lambda}, std::move(out),
                   [diff, alpha, beta, lambda, rank, s = std::move(s)](Tape<S>& t, const MatrixT<S>& g) {
                       const MatrixT<S>& d = diff.value();
                       const MatrixT<S>& lam = lambda.value();
                       const Index E = d.rows();
                       const Index w = d.cols();
                       MatrixT<S> gd(E, w), ga(E, 1), gb(E, 1), gl(E, rank * w);
                       std::vector<S> tv(static_cast<std::size_t>(rank));
                       for (Index e = 0; e < E; ++e) {
                           const S al = alpha.value()(e, 0);
                           const S be = beta.value()(e, 0);
                           S gdot(0.0), ts(0.0);
                           for (Index b = 0; b < w; ++b) gdot += g(e, b) * d(e, b);
                           for (Index a = 0; a < rank; ++a) {
                               S acc(0.0);
                               for (Index b = 0; b < w; ++b) acc += lam(e, a * w + b) * g(e, b);
                               tv[static_cast<std::size_t>(a)] = acc;
                               ts += acc * s(e, a);
                           }
                           ga(e, 0) = gdot;
                           gb(e, 0) = ts;
                           for (Index b = 0; b < w; ++b) {
                               S acc(0.0);
                               for (Index a = 0; a < rank; ++a) acc += lam(e, a * w + b) * tv[static_cast<std::size_t>(a)];
                               gd(e, b) = al * g(e, b) + be * acc;
                           }
                           for (Index a = 0; a < rank; ++a)
                               for (Index b = 0; b < w; ++b)
                                   gl(e, a * w + b) = be * (s(e, a) * g(e, b) + tv[static_cast<std::size_t>(a)] * d(e, b));
                       }
                       if (t.needs_grad(diff)) t.accumulate(diff, gd);
                       if (t.needs_grad(alpha)) t.accumulate(alpha, ga);
                       if (t.needs_grad(beta)) t.accumulate(beta, gb);
                       if (t.needs_grad(lambda)) t.accumulate(lambda, gl);
                   });
}

/// Rotary rotation of each `block`-wide column group: within a block, coordinate k pairs with
/// k + block/2 and is rotated by angle p · base^(-2k/block), p = positions[row].
template <typename S>
Var<S> rope(Var<S> x, std::vector<double> positions, double base, Index block) {
    detail::require(block > 0 && block % 2 == 0 && x.cols() % block == 0, "rope", "block width must be even and divide cols");
    detail::require(static_cast<Index>(positions.size()) == x.rows(), "rope", "one position per row required");
    const Index half = block / 2;
    // cos/sin tables, rows x half
    Matrix cs(x.rows(), half), sn(x.rows(), half);
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index k = 0; k < half; ++k) {
            const double theta = positions[static_cast<std::size_t>(i)] *
                                 std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(block));
            cs(i, k) = std::cos(theta);
            sn(i, k) = std::sin(theta);
        }
    }
    const MatrixT<S>& xv = x.value();
    MatrixT<S> out(xv.rows(), xv.cols());
    for (Index i = 0; i < xv.rows(); ++i)
        for (Index c0 = 0; c0 < xv.cols(); c0 += block)
            for (Index k = 0; k < half; ++k) {
                const S a = xv(i, c0 + k);
                const S b = xv(i, c0 + k + half);
                out(i, c0 + k) = a * S(cs(i, k)) - b * S(sn(i, k));
                out(i, c0 + k + half) = b * S(cs(i, k)) + a * S(sn(i, k));
            }
    return make<S>({x}, std::move(out), [x, half, block, cs = std::move(cs), sn = std::move(sn)](Tape<S>& t, const MatrixT<S>& g) {
        MatrixT<S> gx(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i)
            for (Index c0 = 0; c0 < g.cols(); c0 += block)
                for (Index k = 0; k < half; ++k) {
                    const S ga = g(i, c0 + k);
                    const S gb = g(i, c0 + k + half);
                    gx(i, c0 + k) = ga * S(cs(i, k)) + gb * S(sn(i, k));
                    gx(i, c0 + k + half) = -ga * S(sn(i, k)) + gb * S(cs(i, k));
                }
        t.accumulate(x, gx);
    });
}

// ---------------------------------------------------------------------------------------------
// Reductions and losses (1 x 1 outputs)

template <typename S>
Var<S> sum(Var<S> a) {
    MatrixT<S> out(1, 1);
    out(0, 0) = a.value().sum();
    const Index r = a.rows(), c = a.cols();
    return make<S>({a}, std::move(out), [a, r, c](Tape<S>& t, const MatrixT<S>& g) {
        t.accumulate(a, MatrixT<S>::Constant(r, c, g(0, 0)));
    });
}

template <typename S>
Var<S> sum_squares(Var<S> a) {
    MatrixT<S> out(1, 1);
    out(0, 0) = a.value().squaredNorm();
    return make<S>({a}, std::move(out), [a](Tape<S>& t, const MatrixT<S>& g) {
        t.accumulate(a, a.value() * (S(2.0) * g(0, 0)));
    });
}

/// <a, w> for a constant weight matrix w.
template <typename S>
Var<S> dot_const(Var<S> a, const Matrix& w) {
    detail::require(a.rows() == w.rows() && a.cols() == w.cols(), "dot_const", "shape mismatch");
    MatrixT<S> wc = w.template cast<S>();
    MatrixT<S> out(1, 1);
    out(0, 0) = a.value().cwiseProduct(wc).sum();
    return make<S>({a}, std::move(out), [a, wc = std::move(wc)](Tape<S>& t, const MatrixT<S>& g) {
        t.accumulate(a, wc * g(0, 0));
    });
}

/// Mean over the listed rows of -log softmax(logits_row)[target].
template <typename S>
Var<S> masked_cross_entropy(Var<S> logits, std::vector<Index> rows, std::vector<Index> targets) {
    using std::exp;
    using std::log;
    detail::require(rows.size() == targets.size() && !rows.empty(), "masked_cross_entropy",
                    "need one target per selected row");
    const MatrixT<S>& x = logits.value();
    const Index V = x.cols();
    MatrixT<S> probs(static_cast<Index>(rows.size()), V);
    S total(0.0);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const Index r = rows[k];
        detail::require(r >= 0 && r < x.rows() && targets[k] >= 0 && targets[k] < V, "masked_cross_entropy",
                        "row or target out of range");
        S m = x(r, 0);
        for (Index j = 1; j < V; ++j)
            if (x(r, j) > m) m = x(r, j);
        S z(0.0);
        for (Index j = 0; j < V; ++j) {
            probs(static_cast<Index>(k), j) = exp(x(r, j) - m);
            z += probs(static_cast<Index>(k), j);
        }
        probs.row(static_cast<Index>(k)) /= z;
        total += m + log(z) - x(r, targets[k]);
    }
    const double count = static_cast<double>(rows.size());
    MatrixT<S> out(1, 1);
    out(0, 0) = total / S(count);
    const Index nrows = x.rows();
    return make<S>({logits}, std::move(out),
                   [logits, nrows, V, count, rows = std::move(rows), targets = std::move(targets),
                    probs = std::move(probs)](Tape<S>& t, const MatrixT<S>& g) {
                       MatrixT<S> gx = MatrixT<S>::Zero(nrows, V);
                       const S scale = g(0, 0) / S(count);
                       for (std::size_t k = 0; k < rows.size(); ++k) {
                           gx.row(rows[k]) += probs.row(static_cast<Index>(k)) * scale;
                           gx(rows[k], targets[k]) -= scale;
                       }
                       t.accumulate(logits, gx);
                   });
}

}  // namespace consensus::ad
