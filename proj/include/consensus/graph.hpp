#pragma once

#include <iosfwd>
#include <vector>

#include "consensus/tensor.hpp"

namespace consensus {

struct Edge {
    Index src = 0;
    Index dst = 0;
    double weight = 1.0;
};

/// Directed weighted graph on nodes 0..n-1.
///
/// Invariants (checked on construction): endpoints in range, weights strictly positive, no repeated
/// ordered pair. Self-loops are allowed; they do not affect the Laplacian.
class Graph {
public:
    Graph() = default;
    Graph(Index n, std::vector<Edge> edges);

    Index n() const noexcept { return n_; }
    const std::vector<Edge>& edges() const noexcept { return edges_; }
    std::size_t edge_count() const noexcept { return edges_.size(); }

    /// Weighted adjacency W with W(i,j) = weight of (i,j).
    Matrix adjacency() const;

    /// Connectivity of the underlying undirected skeleton.
    bool connected() const;

    /// `copies` disjoint copies laid out as consecutive node blocks.
    Graph disjoint_union(Index copies) const;

    friend bool operator==(const Graph& a, const Graph& b);

private:
    Index n_ = 0;
    std::vector<Edge> edges_;
};

struct FiedlerBounds {
    double lower = 0.0;
    double upper = 0.0;
};

struct Laplacians {
    Matrix L;
    Matrix L_sym;
};

/// Edge set {(i,j) : 0 < |i-j| <= w}, both directions, unit weights. Requires 1 <= w < n.
Graph build_window_path(Index n, Index w);
/// Cycle power: each node linked to i±1..i±w mod n. Requires 1 <= w < n/2.
Graph build_cycle_power(Index n, Index w);
Graph build_complete(Index n);
Graph build_edgeless(Index n);

/// L = D - W with D the out-degree matrix; L_sym = (L + L^T)/2.
Laplacians laplacians(const Graph& g);

/// Second-smallest eigenvalue of L_sym; exactly 0 when the graph is disconnected.
double fiedler_value(const Graph& g);

/// Closed-form λ₁ of the cycle power C_n^w: 4 Σ_{j=1..w} sin²(πj/n).
double cycle_power_lambda1(Index n, Index w);

/// Two-sided bound on λ₁ of the window-path graph; upper = 4 Σ sin²(πj/2n), lower = upper / 2.
FiedlerBounds path_fiedler_bounds(Index n, Index w);

/// Zero-eigenvalue threshold used throughout: 1e-9 * max(1, λ_max).
inline constexpr double kZeroEigenvalueRelTol = 1e-9;
Index count_zero_eigenvalues(const Vector& ascending_eigenvalues);

struct BlockEdge {
    Index src = 0;
    Index dst = 0;
    Matrix block;
};

/// Graph whose edges carry d x d symmetric positive-definite weight blocks.
class BlockGraph {
public:
    /// Smallest admissible block eigenvalue.
    static constexpr double kMinBlockEigenvalue = 1e-12;

    BlockGraph(Index n, Index d, std::vector<BlockEdge> edges);

    Index n() const noexcept { return n_; }
    Index d() const noexcept { return d_; }
    const std::vector<BlockEdge>& edges() const noexcept { return edges_; }

    /// Scalar graph with the same edge set (block structure discarded).
    Graph skeleton() const;

private:
    Index n_;
    Index d_;
    std::vector<BlockEdge> edges_;
};

/// Block Laplacian L = D - W in R^{nd x nd} with D_i = Σ_{j≠i} W_ij, and its symmetrization.
Laplacians block_laplacian(const BlockGraph& bg);

/// Bipartite directed edges from source node i < n_source to context node j < n_context.
struct BipartiteGraph {
    Index n_source = 0;
    Index n_context = 0;
    std::vector<Edge> edges;

    void validate() const;
};

/// {(i,j) : 0 <= i,j < n, |i-j| <= w}; w = 0 gives exactly the diagonal pairs.
BipartiteGraph build_bipartite_window(Index n, Index w);

/// Line format: `n <N>` followed by one `edge <src> <dst> <weight>` per edge.
void write_graph(std::ostream& out, const Graph& g);
Graph read_graph(std::istream& in);

}  // namespace consensus
