#include "consensus/consensus.hpp"

#include <cmath>

namespace consensus {

namespace {

const char* const kPhis[3] = {"alpha", "beta", "lambda"};

std::string head_slot(const std::string& prefix, Index head, const char* phi, const char* part) {
    return prefix + "h" + std::to_string(head) + "." + phi + "." + part;
}

Index phi_width(const ConsensusHyper& h, int phi) { return phi == 2 ? h.rank * h.head_dim() : 1; }

void fill_uniform(Eigen::Map<Matrix> m, double bound, Rng& rng) {
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-bound, bound);
}

double gelu_value(double x) {
    constexpr double k = 0.7978845608028654;
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double softplus_value(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

std::vector<double> default_positions(const std::vector<double>& positions, Index n) {
    if (!positions.empty()) {
        if (static_cast<Index>(positions.size()) != n) throw DimensionError("one position per row required");
        return positions;
    }
    std::vector<double> out(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(i);
    return out;
}

void require_embedding(const Matrix& y, const ConsensusHyper& h, const char* what) {
    if (y.cols() != h.d)
        throw DimensionError(std::string(what) + " has width " + std::to_string(y.cols()) + ", expected d = " +
                             std::to_string(h.d));
}

void require_edges(const EdgeIndex& e, Index n_from, Index n_to) {
    if (e.src.size() != e.dst.size()) throw DimensionError("edge index arrays differ in length");
    for (std::size_t k = 0; k < e.src.size(); ++k)
        if (e.src[k] < 0 || e.src[k] >= n_from || e.dst[k] < 0 || e.dst[k] >= n_to)
            throw ParameterError("edge (" + std::to_string(e.src[k]) + "," + std::to_string(e.dst[k]) +
                                 ") out of range");
}

/// Edge weight for one (i, j) pair written straight from the definitions.
ConsensusEdgeWeight edge_weight_value(const ParameterStore& store, const std::string& prefix, const ConsensusHyper& h,
                                      Index head, const Eigen::Ref<const Vector>& yi,
                                      const Eigen::Ref<const Vector>& yj) {
    const Index d = h.d;
    const Index dh = h.head_dim();
    Vector z(2 * d);
    z << yi, yj;
    Vector outs[3];
    for (int phi = 0; phi < 3; ++phi) {
        const Matrix w1 = store.get(head_slot(prefix, head, kPhis[phi], "w1"));
        const Vector b1 = store.get(head_slot(prefix, head, kPhis[phi], "b1")).row(0).transpose();
        const Matrix w = store.get(head_slot(prefix, head, kPhis[phi], "w"));
        const Vector b = store.get(head_slot(prefix, head, kPhis[phi], "b")).row(0).transpose();
        Vector hidden = w1 * z + b1;
        for (Index k = 0; k < hidden.size(); ++k) hidden(k) = gelu_value(hidden(k));
        outs[phi] = w * hidden + b;
    }
    ConsensusEdgeWeight ew;
    ew.alpha = softplus_value(outs[0](0));
    ew.beta = softplus_value(outs[1](0));
    ew.lambda = row_norm_rn(reshape_rs(outs[2], h.rank, dh)) / std::sqrt(static_cast<double>(h.rank));
    ew.r_matrix = ew.alpha * Matrix::Identity(dh, dh) + ew.beta * ew.lambda.transpose() * ew.lambda;
    return ew;
}

Matrix project(const Matrix& x, const ParameterStore& store, const std::string& w, const std::string& b) {
    Matrix out = x * store.get(w).transpose();
    out.rowwise() += store.get(b).row(0);
    return out;
}

}  // namespace

void ConsensusHyper::validate() const {
    if (d < 1) throw ConfigurationError("consensus: d must be positive");
    if (heads < 1) throw ConfigurationError("consensus: head count must be positive");
    if (d % heads != 0)
        throw ConfigurationError("consensus: d = " + std::to_string(d) + " is not divisible by H = " +
                                 std::to_string(heads));
    if (!(eta > 0.0)) throw ConfigurationError("consensus: step size eta must be positive");
    if (rank < 1) throw ConfigurationError("consensus: rank must be >= 1");
    if (edge_hidden < 1) throw ConfigurationError("consensus: edge hidden width must be >= 1");
    if (rope && d % 2 != 0) throw ConfigurationError("consensus: RoPE requires even d");
    if (rope && !(rope_base > 0.0)) throw ConfigurationError("consensus: RoPE base must be positive");
}

EdgeIndex EdgeIndex::from(const Graph& g) {
    EdgeIndex e;
    e.src.reserve(g.edge_count());
    e.dst.reserve(g.edge_count());
    for (const auto& edge : g.edges()) {
        e.src.push_back(edge.src);
        e.dst.push_back(edge.dst);
    }
    return e;
}

EdgeIndex EdgeIndex::from(const BipartiteGraph& g) {
    g.validate();
    EdgeIndex e;
    for (const auto& edge : g.edges) {
        e.src.push_back(edge.src);
        e.dst.push_back(edge.dst);
    }
    return e;
}

void add_consensus_params(ParameterStore& store, const std::string& prefix, const ConsensusHyper& h) {
    h.validate();
    const Index d = h.d;
    store.add(prefix + "w_s", d, d);
    store.add(prefix + "b_s", 1, d);
    if (h.cross) {
        store.add(prefix + "w_c", d, d);
        store.add(prefix + "b_c", 1, d);
    }
    store.add(prefix + "w_o", d, d);
    store.add(prefix + "b_o", 1, d);
    for (Index head = 0; head < h.heads; ++head) {
        for (int phi = 0; phi < 3; ++phi) {
            const Index out = phi_width(h, phi);
            store.add(head_slot(prefix, head, kPhis[phi], "w1"), h.edge_hidden, 2 * d);
            store.add(head_slot(prefix, head, kPhis[phi], "b1"), 1, h.edge_hidden);
            store.add(head_slot(prefix, head, kPhis[phi], "w"), out, h.edge_hidden);
            store.add(head_slot(prefix, head, kPhis[phi], "b"), 1, out);
        }
    }
}

void init_consensus_params(ParameterStore& store, const std::string& prefix, const ConsensusHyper& h, Rng& rng) {
    const double proj = 1.0 / std::sqrt(static_cast<double>(h.d));
    fill_uniform(store.get(prefix + "w_s"), proj, rng);
    if (h.cross) fill_uniform(store.get(prefix + "w_c"), proj, rng);
    fill_uniform(store.get(prefix + "w_o"), proj, rng);
    for (Index head = 0; head < h.heads; ++head) {
        for (int phi = 0; phi < 3; ++phi) {
            fill_uniform(store.get(head_slot(prefix, head, kPhis[phi], "w1")),
                         1.0 / std::sqrt(static_cast<double>(2 * h.d)), rng);
            fill_uniform(store.get(head_slot(prefix, head, kPhis[phi], "w")),
                         1.0 / std::sqrt(static_cast<double>(h.edge_hidden)), rng);
        }
    }
}

template <typename S>
EdgeWeightVars<S> edge_weights(const Bound<S>& p, const std::string& prefix, const ConsensusHyper& h, Index head,
                               ad::Var<S> from, ad::Var<S> to, const EdgeIndex& edges) {
    const Index d = h.d;
    auto phi_out = [&](int phi) {
        const ad::Var<S> w1 = p[head_slot(prefix, head, kPhis[phi], "w1")];
        // W1 [y_i; y_j] = W1[:, :d] y_i + W1[:, d:] y_j, computed per node and gathered per edge.
        const ad::Var<S> a = ad::matmul_nt(from, ad::slice_cols(w1, 0, d));
        const ad::Var<S> b = ad::matmul_nt(to, ad::slice_cols(w1, d, d));
        const ad::Var<S> pre = ad::add(ad::gather_rows(a, edges.src), ad::gather_rows(b, edges.dst));
        const ad::Var<S> hidden = ad::gelu(ad::add_rowvec(pre, p[head_slot(prefix, head, kPhis[phi], "b1")]));
        return ad::linear(hidden, p[head_slot(prefix, head, kPhis[phi], "w")],
                          p[head_slot(prefix, head, kPhis[phi], "b")]);
    };
    EdgeWeightVars<S> out{ad::softplus(phi_out(0)), ad::softplus(phi_out(1)), phi_out(2)};
    out.lambda = ad::scale(ad::row_norm_chunks(out.lambda, h.head_dim()), 1.0 / std::sqrt(static_cast<double>(h.rank)));
    return out;
}

template <typename S>
ad::Var<S> self_consensus(const Bound<S>& p, const std::string& prefix, const ConsensusHyper& h, ad::Var<S> y,
                          const EdgeIndex& edges, const std::vector<double>& positions) {
    h.validate();
    if (y.cols() != h.d) throw DimensionError("self_consensus: embedding width does not match d");
    require_edges(edges, y.rows(), y.rows());
    const Index n = y.rows();
    const Index dh = h.head_dim();

    const ad::Var<S> u = ad::linear(y, p[prefix + "w_s"], p[prefix + "b_s"]);
    const ad::Var<S> ut = h.rope ? ad::rope(u, default_positions(positions, n), h.rope_base, h.d) : u;
    std::vector<ad::Var<S>> updates;
    for (Index head = 0; head < h.heads; ++head) {
        const ad::Var<S> uh = h.heads == 1 ? ut : ad::slice_cols(ut, head * dh, dh);
        const ad::Var<S> diff = ad::sub(ad::gather_rows(uh, edges.src), ad::gather_rows(uh, edges.dst));
        const EdgeWeightVars<S> ew = edge_weights(p, prefix, h, head, y, y, edges);
        const ad::Var<S> m = ad::apply_edge_weights(diff, ew.alpha, ew.beta, ew.lambda, h.rank);
        updates.push_back(ad::sub(ad::scatter_add_rows(m, edges.src, n), ad::scatter_add_rows(m, edges.dst, n)));
    }
    const ad::Var<S> g = h.heads == 1 ? updates.front() : ad::concat_cols(updates);
    const ad::Var<S> u_next = ad::sub(u, ad::scale(g, h.eta));
    return ad::linear(u_next, p[prefix + "w_o"], p[prefix + "b_o"]);
}

template <typename S>
ad::Var<S> cross_consensus(const Bound<S>& p, const std::string& prefix, const ConsensusHyper& h, ad::Var<S> y,
                           ad::Var<S> c, const EdgeIndex& edges, const std::vector<double>& source_positions,
                           const std::vector<double>& context_positions) {
    h.validate();
    if (!h.cross) throw ConfigurationError("cross_consensus: parameters were registered without the context projection");
    if (y.cols() != h.d || c.cols() != h.d) throw DimensionError("cross_consensus: embedding width does not match d");
    require_edges(edges, y.rows(), c.rows());
    const Index n = y.rows();
    const Index dh = h.head_dim();

    const ad::Var<S> u = ad::linear(y, p[prefix + "w_s"], p[prefix + "b_s"]);
    const ad::Var<S> v = ad::linear(c, p[prefix + "w_c"], p[prefix + "b_c"]);
    const ad::Var<S> ut = h.rope ? ad::rope(u, default_positions(source_positions, n), h.rope_base, h.d) : u;
    const ad::Var<S> vt = h.rope ? ad::rope(v, default_positions(context_positions, c.rows()), h.rope_base, h.d) : v;
    std::vector<ad::Var<S>> updates;
    for (Index head = 0; head < h.heads; ++head) {
        const ad::Var<S> uh = h.heads == 1 ? ut : ad::slice_cols(ut, head * dh, dh);
        const ad::Var<S> vh = h.heads == 1 ? vt : ad::slice_cols(vt, head * dh, dh);
        const ad::Var<S> diff = ad::sub(ad::gather_rows(uh, edges.src), ad::gather_rows(vh, edges.dst));
        const EdgeWeightVars<S> ew = edge_weights(p, prefix, h, head, y, c, edges);
        const ad::Var<S> m = ad::apply_edge_weights(diff, ew.alpha, ew.beta, ew.lambda, h.rank);
        updates.push_back(ad::scatter_add_rows(m, edges.src, n));
    }
    const ad::Var<S> g = h.heads == 1 ? updates.front() : ad::concat_cols(updates);
    const ad::Var<S> u_next = ad::sub(u, ad::scale(g, h.eta));
    return ad::linear(u_next, p[prefix + "w_o"], p[prefix + "b_o"]);
}

template EdgeWeightVars<double> edge_weights(const Bound<double>&, const std::string&, const ConsensusHyper&, Index,
                                             ad::Var<double>, ad::Var<double>, const EdgeIndex&);
template EdgeWeightVars<Dual> edge_weights(const Bound<Dual>&, const std::string&, const ConsensusHyper&, Index,
                                           ad::Var<Dual>, ad::Var<Dual>, const EdgeIndex&);
template ad::Var<double> self_consensus(const Bound<double>&, const std::string&, const ConsensusHyper&,
                                        ad::Var<double>, const EdgeIndex&, const std::vector<double>&);
template ad::Var<Dual> self_consensus(const Bound<Dual>&, const std::string&, const ConsensusHyper&, ad::Var<Dual>,
                                      const EdgeIndex&, const std::vector<double>&);
template ad::Var<double> cross_consensus(const Bound<double>&, const std::string&, const ConsensusHyper&,
                                         ad::Var<double>, ad::Var<double>, const EdgeIndex&,
                                         const std::vector<double>&, const std::vector<double>&);
template ad::Var<Dual> cross_consensus(const Bound<Dual>&, const std::string&, const ConsensusHyper&, ad::Var<Dual>,
                                       ad::Var<Dual>, const EdgeIndex&, const std::vector<double>&,
                                       const std::vector<double>&);

// --- value-level -----------------------------------------------------------------------------

Matrix reshape_rs(const Vector& v, Index rows, Index cols) {
    if (rows < 0 || cols < 0 || v.size() != rows * cols)
        throw DimensionError("reshape: length " + std::to_string(v.size()) + " does not equal " +
                             std::to_string(rows) + " x " + std::to_string(cols));
    Matrix out(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) out(i, j) = v(i * cols + j);
    return out;
}

Matrix row_norm_rn(const Matrix& m) {
    Matrix out = m;
    for (Index i = 0; i < m.rows(); ++i) {
        const double n = m.row(i).norm();
        if (n > 0.0) out.row(i) /= n;
    }
    return out;
}

Matrix rope_rotate(const Matrix& u, double base, const std::vector<double>& positions) {
    if (u.cols() % 2 != 0) throw ConfigurationError("rope_rotate: dimension must be even");
    if (!(base > 0.0)) throw ConfigurationError("rope_rotate: base must be positive");
    const std::vector<double> pos = default_positions(positions, u.rows());
    const Index d = u.cols();
    const Index half = d / 2;
    Matrix out(u.rows(), d);
    for (Index i = 0; i < u.rows(); ++i) {
        for (Index k = 0; k < half; ++k) {
            const double theta =
                pos[static_cast<std::size_t>(i)] * std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
            const double c = std::cos(theta);
            const double s = std::sin(theta);
            // (P u)_k = -u_{k+d/2}, (P u)_{k+d/2} = u_k
            out(i, k) = u(i, k) * c - u(i, k + half) * s;
            out(i, k + half) = u(i, k + half) * c + u(i, k) * s;
        }
    }
    return out;
}

std::vector<ConsensusEdgeWeight> scwm(const Matrix& y, const Graph& g, const ParameterStore& store,
                                      const std::string& prefix, const ConsensusHyper& h, Index head) {
    h.validate();
    require_embedding(y, h, "scwm input");
    if (y.rows() != g.n()) throw DimensionError("scwm: sequence length does not match graph size");
    if (head < 0 || head >= h.heads) throw ParameterError("scwm: head index out of range");
    std::vector<ConsensusEdgeWeight> out;
    out.reserve(g.edge_count());
    for (const auto& e : g.edges())
        out.push_back(edge_weight_value(store, prefix, h, head, y.row(e.src).transpose(), y.row(e.dst).transpose()));
    return out;
}

std::vector<ConsensusEdgeWeight> ccwm(const Matrix& y, const Matrix& c, const BipartiteGraph& g,
                                      const ParameterStore& store, const std::string& prefix,
                                      const ConsensusHyper& h, Index head) {
    h.validate();
    g.validate();
    require_embedding(y, h, "ccwm source");
    require_embedding(c, h, "ccwm context");
    if (y.rows() != g.n_source || c.rows() != g.n_context)
        throw DimensionError("ccwm: sequence lengths do not match the bipartite graph");
    if (head < 0 || head >= h.heads) throw ParameterError("ccwm: head index out of range");
    std::vector<ConsensusEdgeWeight> out;
    out.reserve(g.edges.size());
    for (const auto& e : g.edges)
        out.push_back(edge_weight_value(store, prefix, h, head, y.row(e.src).transpose(), c.row(e.dst).transpose()));
    return out;
}

Matrix self_consensus_update(const Matrix& u, const Graph& g, const std::vector<ConsensusEdgeWeight>& weights) {
    if (u.rows() != g.n()) throw DimensionError("consensus update: signal rows do not match graph size");
    if (weights.size() != g.edge_count()) throw DimensionError("consensus update: one weight per edge required");
    Matrix out = Matrix::Zero(u.rows(), u.cols());
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const auto& e = g.edges()[k];
        if (weights[k].r_matrix.rows() != u.cols()) throw DimensionError("consensus update: weight block size mismatch");
        const Vector m = weights[k].r_matrix * (u.row(e.src) - u.row(e.dst)).transpose();
        out.row(e.src) += m.transpose();
        out.row(e.dst) -= m.transpose();
    }
    return out;
}

Matrix self_consensus_forward(const Matrix& y, const Graph& g, const ParameterStore& store, const std::string& prefix,
                              const ConsensusHyper& h) {
    if (h.heads != 1) throw ConfigurationError("self_consensus_forward is the single-head form (H = 1)");
    const auto weights = scwm(y, g, store, prefix, h, 0);
    const Matrix u = project(y, store, prefix + "w_s", prefix + "b_s");
    const Matrix ut = h.rope ? rope_rotate(u, h.rope_base) : u;
    const Matrix u_next = u - h.eta * self_consensus_update(ut, g, weights);
    return project(u_next, store, prefix + "w_o", prefix + "b_o");
}

Matrix cross_consensus_forward(const Matrix& y, const Matrix& c, const BipartiteGraph& g, const ParameterStore& store,
                               const std::string& prefix, const ConsensusHyper& h) {
    if (h.heads != 1) throw ConfigurationError("cross_consensus_forward is the single-head form (H = 1)");
    if (!h.cross) throw ConfigurationError("cross_consensus_forward: context projection not registered");
    const auto weights = ccwm(y, c, g, store, prefix, h, 0);
    const Matrix u = project(y, store, prefix + "w_s", prefix + "b_s");
    const Matrix v = project(c, store, prefix + "w_c", prefix + "b_c");
    const Matrix ut = h.rope ? rope_rotate(u, h.rope_base) : u;
    const Matrix vt = h.rope ? rope_rotate(v, h.rope_base) : v;
    Matrix gsum = Matrix::Zero(u.rows(), u.cols());
    for (std::size_t k = 0; k < weights.size(); ++k) {
        const auto& e = g.edges[k];
        gsum.row(e.src) += (weights[k].r_matrix * (ut.row(e.src) - vt.row(e.dst)).transpose()).transpose();
    }
    return project(u - h.eta * gsum, store, prefix + "w_o", prefix + "b_o");
}

Matrix multi_head_self_consensus(const Matrix& y, const Graph& g, const ParameterStore& store,
                                 const std::string& prefix, const ConsensusHyper& h) {
    h.validate();
    require_embedding(y, h, "self-consensus input");
    if (y.rows() != g.n()) throw DimensionError("self-consensus: sequence length does not match graph size");
    ad::Tape<double> tape;
    Bound<double> p(tape, store, store.values(), false);
    return self_consensus(p, prefix, h, tape.constant(y), EdgeIndex::from(g)).value();
}

Matrix multi_head_cross_consensus(const Matrix& y, const Matrix& c, const BipartiteGraph& g,
                                  const ParameterStore& store, const std::string& prefix, const ConsensusHyper& h) {
    h.validate();
    require_embedding(y, h, "cross-consensus source");
    require_embedding(c, h, "cross-consensus context");
    if (y.rows() != g.n_source || c.rows() != g.n_context)
        throw DimensionError("cross-consensus: sequence lengths do not match the bipartite graph");
    ad::Tape<double> tape;
    Bound<double> p(tape, store, store.values(), false);
    return cross_consensus(p, prefix, h, tape.constant(y), tape.constant(c), EdgeIndex::from(g)).value();
}

}  // namespace consensus
