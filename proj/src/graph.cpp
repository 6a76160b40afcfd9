#include "consensus/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>

namespace consensus {

namespace {

void require_window(Index n, Index w, bool cycle) {
    if (w < 1) throw ParameterError("window size must be >= 1, got " + std::to_string(w));
    if (cycle) {
        if (2 * w >= n)
            throw ParameterError("cycle power requires w < n/2 (n=" + std::to_string(n) +
                                 ", w=" + std::to_string(w) + ")");
    } else if (w >= n) {
        throw ParameterError("window path requires w < n (n=" + std::to_string(n) + ", w=" +
                             std::to_string(w) + ")");
    }
}

Index find_root(std::vector<Index>& parent, Index x) {
    while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    return x;
}

std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

}  // namespace

Graph::Graph(Index n, std::vector<Edge> edges) : n_(n), edges_(std::move(edges)) {
    if (n < 0) throw ParameterError("graph node count must be non-negative");
    std::set<std::pair<Index, Index>> seen;
    for (const auto& e : edges_) {
        if (e.src < 0 || e.src >= n || e.dst < 0 || e.dst >= n)
            throw ParameterError("edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) +
                                 ") out of range for n=" + std::to_string(n));
        if (!(e.weight > 0.0) || !std::isfinite(e.weight))
            throw ParameterError("edge weights must be finite and positive");
        if (!seen.emplace(e.src, e.dst).second)
            throw ParameterError("duplicate edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) + ")");
    }
}

Matrix Graph::adjacency() const {
    Matrix w = Matrix::Zero(n_, n_);
    for (const auto& e : edges_) w(e.src, e.dst) = e.weight;
    return w;
}

bool Graph::connected() const {
    if (n_ <= 1) return true;
    std::vector<Index> parent(static_cast<std::size_t>(n_));
    std::iota(parent.begin(), parent.end(), Index{0});
    Index components = n_;
    for (const auto& e : edges_) {
        const Index a = find_root(parent, e.src);
        const Index b = find_root(parent, e.dst);
        if (a != b) {
            parent[a] = b;
            --components;
        }
    }
    return components == 1;
}

Graph Graph::disjoint_union(Index copies) const {
    std::vector<Edge> out;
    out.reserve(edges_.size() * static_cast<std::size_t>(copies));
    for (Index c = 0; c < copies; ++c)
        for (const auto& e : edges_) out.push_back({e.src + c * n_, e.dst + c * n_, e.weight});
    return Graph(n_ * copies, std::move(out));
}

bool operator==(const Graph& a, const Graph& b) {
    if (a.n_ != b.n_ || a.edges_.size() != b.edges_.size()) return false;
    for (std::size_t k = 0; k < a.edges_.size(); ++k) {
        const auto& x = a.edges_[k];
        const auto& y = b.edges_[k];
        if (x.src != y.src || x.dst != y.dst || x.weight != y.weight) return false;
    }
    return true;
}

Graph build_window_path(Index n, Index w) {
    require_window(n, w, false);
    std::vector<Edge> edges;
    for (Index i = 0; i < n; ++i)
        for (Index j = std::max<Index>(0, i - w); j <= std::min(n - 1, i + w); ++j)
            if (j != i) edges.push_back({i, j, 1.0});
    return Graph(n, std::move(edges));
}

Graph build_cycle_power(Index n, Index w) {
    require_window(n, w, true);
    std::vector<Edge> edges;
    for (Index i = 0; i < n; ++i) {
        for (Index k = 1; k <= w; ++k) {
            edges.push_back({i, (i + k) % n, 1.0});
            edges.push_back({i, (i - k + n) % n, 1.0});
        }
    }
    return Graph(n, std::move(edges));
}

Graph build_complete(Index n) {
    std::vector<Edge> edges;
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            if (i != j) edges.push_back({i, j, 1.0});
    return Graph(n, std::move(edges));
}

Graph build_edgeless(Index n) { return Graph(n, {}); }

Laplacians laplacians(const Graph& g) {
    Matrix L = Matrix::Zero(g.n(), g.n());
    for (const auto& e : g.edges()) {
        if (e.src == e.dst) continue;  // a self-loop adds w to D_ii and subtracts w from W_ii
        L(e.src, e.src) += e.weight;
        L(e.src, e.dst) -= e.weight;
    }
    Matrix L_sym = 0.5 * (L + L.transpose());
    return {std::move(L), std::move(L_sym)};
}

double fiedler_value(const Graph& g) {
    if (g.n() < 2 || !g.connected()) return 0.0;
    return sym_eigenvalues(laplacians(g).L_sym)(1);
}

double cycle_power_lambda1(Index n, Index w) {
    require_window(n, w, true);
    double sum = 0.0;
    for (Index j = 1; j <= w; ++j) {
        const double s = std::sin(M_PI * static_cast<double>(j) / static_cast<double>(n));
        sum += s * s;
    }
    return 4.0 * sum;
}

FiedlerBounds path_fiedler_bounds(Index n, Index w) {
    require_window(n, w, true);
    double sum = 0.0;
    for (Index j = 1; j <= w; ++j) {
        const double s = std::sin(M_PI * static_cast<double>(j) / (2.0 * static_cast<double>(n)));
        sum += s * s;
    }
    return {2.0 * sum, 4.0 * sum};
}

Index count_zero_eigenvalues(const Vector& ev) {
    if (ev.size() == 0) return 0;
    const double threshold = kZeroEigenvalueRelTol * std::max(1.0, ev.cwiseAbs().maxCoeff());
    return static_cast<Index>((ev.array().abs() <= threshold).count());
}

BlockGraph::BlockGraph(Index n, Index d, std::vector<BlockEdge> edges) : n_(n), d_(d), edges_(std::move(edges)) {
    if (d < 1) throw DimensionError("block dimension must be >= 1");
    std::set<std::pair<Index, Index>> seen;
    for (const auto& e : edges_) {
        if (e.src < 0 || e.src >= n || e.dst < 0 || e.dst >= n) throw ParameterError("block edge out of range");
        if (e.block.rows() != d || e.block.cols() != d)
            throw DimensionError("block edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) +
                                 ") has a " + std::to_string(e.block.rows()) + "x" +
                                 std::to_string(e.block.cols()) + " block, expected " + std::to_string(d) +
                                 "x" + std::to_string(d));
        if (max_abs(e.block - e.block.transpose()) > 1e-12) throw SymmetryError("block weights must be symmetric");
        if (sym_eigenvalues(e.block)(0) <= kMinBlockEigenvalue)
            throw DefinitenessError("block weights must be positive definite");
        if (!seen.emplace(e.src, e.dst).second) throw ParameterError("duplicate block edge");
    }
}

Graph BlockGraph::skeleton() const {
    std::vector<Edge> out;
    out.reserve(edges_.size());
    for (const auto& e : edges_) out.push_back({e.src, e.dst, 1.0});
    return Graph(n_, std::move(out));
}

Laplacians block_laplacian(const BlockGraph& bg) {
    const Index n = bg.n();
    const Index d = bg.d();
    Matrix L = Matrix::Zero(n * d, n * d);
    for (const auto& e : bg.edges()) {
        if (e.src == e.dst) continue;
        L.block(e.src * d, e.src * d, d, d) += e.block;
        L.block(e.src * d, e.dst * d, d, d) -= e.block;
    }
    Matrix L_sym = 0.5 * (L + L.transpose());
    return {std::move(L), std::move(L_sym)};
}

void BipartiteGraph::validate() const {
    std::set<std::pair<Index, Index>> seen;
    for (const auto& e : edges) {
        if (e.src < 0 || e.src >= n_source || e.dst < 0 || e.dst >= n_context)
            throw ParameterError("bipartite edge (" + std::to_string(e.src) + "," + std::to_string(e.dst) +
                                 ") out of range");
        if (!seen.emplace(e.src, e.dst).second) throw ParameterError("duplicate bipartite edge");
    }
}

BipartiteGraph build_bipartite_window(Index n, Index w) {
    if (w < 0) throw ParameterError("bipartite window must be >= 0");
    BipartiteGraph g{n, n, {}};
    for (Index i = 0; i < n; ++i)
        for (Index j = std::max<Index>(0, i - w); j <= std::min(n - 1, i + w); ++j) g.edges.push_back({i, j, 1.0});
    return g;
}

void write_graph(std::ostream& out, const Graph& g) {
    out << "n " << g.n() << '\n';
    for (const auto& e : g.edges()) out << "edge " << e.src << ' ' << e.dst << ' ' << format_double(e.weight) << '\n';
}

Graph read_graph(std::istream& in) {
    std::string line;
    Index n = -1;
    std::vector<Edge> edges;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "n") {
            if (n >= 0 || !(ls >> n)) throw IoError("graph: bad header on line " + std::to_string(lineno));
        } else if (tag == "edge") {
            if (n < 0) throw IoError("graph: edge before header on line " + std::to_string(lineno));
            Edge e;
            std::string weight;
            if (!(ls >> e.src >> e.dst >> weight)) throw IoError("graph: bad edge on line " + std::to_string(lineno));
            auto res = std::from_chars(weight.data(), weight.data() + weight.size(), e.weight);
            if (res.ec != std::errc{} || res.ptr != weight.data() + weight.size())
                throw IoError("graph: bad weight on line " + std::to_string(lineno));
            edges.push_back(e);
        } else {
            throw IoError("graph: unknown record '" + tag + "' on line " + std::to_string(lineno));
        }
    }
    if (n < 0) throw IoError("graph: missing header");
    return Graph(n, std::move(edges));
}

}  // namespace consensus
