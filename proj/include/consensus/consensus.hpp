#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "consensus/graph.hpp"
#include "consensus/params.hpp"

namespace consensus {

struct ConsensusHyper {
    Index d = 0;
    Index heads = 1;
    Index rank = 4;
    /// Edge-MLP hidden width ξ.
    Index edge_hidden = 256;
    double eta = 0.1;
    bool rope = false;
    double rope_base = 10000.0;
    /// Registers the context projection (W_c, b_c) as well.
    bool cross = false;

    Index head_dim() const { return d / heads; }
    /// Throws ConfigurationError unless d = H·d_h, η > 0, r ≥ 1, ξ ≥ 1 (and d even under RoPE).
    void validate() const;
};

/// Per-edge weight bundle: R = α I + β ΛᵀΛ.
struct ConsensusEdgeWeight {
    double alpha = 0.0;
    double beta = 0.0;
    Matrix lambda;    // r x d_h
    Matrix r_matrix;  // d_h x d_h
};

/// Directed edge lists as parallel index arrays. For self-consensus both ends index the same
/// sequence; for cross-consensus `dst` indexes the context sequence.
struct EdgeIndex {
    std::vector<Index> src;
    std::vector<Index> dst;

    static EdgeIndex from(const Graph& g);
    static EdgeIndex from(const BipartiteGraph& g);
    std::size_t size() const noexcept { return src.size(); }
};

/// Slot names are `<prefix>w_s`, `<prefix>b_s`, `<prefix>w_o`, `<prefix>b_o`, optionally
/// `<prefix>w_c`, `<prefix>b_c`, and per head h and φ ∈ {alpha, beta, lambda}:
/// `<prefix>h<h>.<φ>.w1` (ξ x 2d), `.b1` (1 x ξ), `.w` (out x ξ), `.b` (1 x out).
void add_consensus_params(ParameterStore& store, const std::string& prefix, const ConsensusHyper& hyper);

/// Weights uniform in ±1/√fan_in, biases zero.
void init_consensus_params(ParameterStore& store, const std::string& prefix, const ConsensusHyper& hyper, Rng& rng);

// --- differentiable forms --------------------------------------------------------------------

template <typename S>
struct EdgeWeightVars {
    ad::Var<S> alpha;   // E x 1
    ad::Var<S> beta;    // E x 1
    ad::Var<S> lambda;  // E x (r·d_h), row-major r x d_h per edge
};

/// SCWM/CCWM for one head. `from` supplies the i-side embeddings, `to` the j-side ones
/// (the same sequence for self-consensus).
template <typename S>
EdgeWeightVars<S> edge_weights(const Bound<S>& p, const std::string& prefix, const ConsensusHyper& hyper, Index head,
                               ad::Var<S> from, ad::Var<S> to, const EdgeIndex& edges);

/// Multi-head self-consensus on the rows of y. `positions` (one per row) drive RoPE; empty means
/// 0..n-1.
template <typename S>
ad::Var<S> self_consensus(const Bound<S>& p, const std::string& prefix, const ConsensusHyper& hyper, ad::Var<S> y,
                          const EdgeIndex& edges, const std::vector<double>& positions = {});

/// Multi-head cross-consensus: y is updated toward the context c along bipartite edges.
template <typename S>
ad::Var<S> cross_consensus(const Bound<S>& p, const std::string& prefix, const ConsensusHyper& hyper, ad::Var<S> y,
                           ad::Var<S> c, const EdgeIndex& edges, const std::vector<double>& source_positions = {},
                           const std::vector<double>& context_positions = {});

// --- value-level forms -----------------------------------------------------------------------

/// [RS(v)]_{i,j} = v_{i·cols + j}.
Matrix reshape_rs(const Vector& v, Index rows, Index cols);
/// Unit-norm rows; zero rows pass through.
Matrix row_norm_rn(const Matrix& m);

/// Half-split rotary rotation of every row of u (row i at position positions[i], default i).
Matrix rope_rotate(const Matrix& u, double base, const std::vector<double>& positions = {});

/// SCWM for one head, evaluated edge by edge; one entry per edge of g, in edge order.
std::vector<ConsensusEdgeWeight> scwm(const Matrix& y, const Graph& g, const ParameterStore& store,
                                      const std::string& prefix, const ConsensusHyper& hyper, Index head = 0);
std::vector<ConsensusEdgeWeight> ccwm(const Matrix& y, const Matrix& c, const BipartiteGraph& g,
                                      const ParameterStore& store, const std::string& prefix,
                                      const ConsensusHyper& hyper, Index head = 0);

/// The consensus disagreement sum g (n x d) for single-head weights; exposed for the
/// translation-invariance and energy-descent properties.
Matrix self_consensus_update(const Matrix& u, const Graph& g, const std::vector<ConsensusEdgeWeight>& weights);

/// Single-head self-consensus written directly from the per-edge R matrices (requires H = 1).
Matrix self_consensus_forward(const Matrix& y, const Graph& g, const ParameterStore& store, const std::string& prefix,
                              const ConsensusHyper& hyper);
Matrix cross_consensus_forward(const Matrix& y, const Matrix& c, const BipartiteGraph& g, const ParameterStore& store,
                               const std::string& prefix, const ConsensusHyper& hyper);

/// Multi-head forms, evaluated through the differentiable path.
Matrix multi_head_self_consensus(const Matrix& y, const Graph& g, const ParameterStore& store,
                                 const std::string& prefix, const ConsensusHyper& hyper);
Matrix multi_head_cross_consensus(const Matrix& y, const Matrix& c, const BipartiteGraph& g,
                                  const ParameterStore& store, const std::string& prefix, const ConsensusHyper& hyper);

}  // namespace consensus
