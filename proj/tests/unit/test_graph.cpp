#include "doctest.h"
#include "oracles.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "consensus/filter.hpp"
#include "consensus/graph.hpp"

using namespace consensus;

namespace {

std::set<std::pair<Index, Index>> edge_pairs(const Graph& g) {
    std::set<std::pair<Index, Index>> out;
    for (const auto& e : g.edges()) out.insert({e.src, e.dst});
    return out;
}

}  // namespace

TEST_CASE("Graph validation") {
    CHECK_THROWS_AS(Graph(2, {{0, 2, 1.0}}), ParameterError);
    CHECK_THROWS_AS(Graph(2, {{0, 1, 0.0}}), ParameterError);
    CHECK_THROWS_AS(Graph(2, {{0, 1, -1.0}}), ParameterError);
    CHECK_THROWS_AS(Graph(2, {{0, 1, 1.0}, {0, 1, 2.0}}), ParameterError);
    CHECK_NOTHROW(Graph(2, {{0, 0, 3.0}, {0, 1, 1.0}}));
}

TEST_CASE("build_window_path") {
    const Graph g2 = build_window_path(2, 1);
    CHECK(edge_pairs(g2) == std::set<std::pair<Index, Index>>{{0, 1}, {1, 0}});

    const Graph g4 = build_window_path(4, 2);
    CHECK(g4.edge_count() == 10);
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) {
            const bool expected = i != j && std::abs(i - j) <= 2;
            CHECK(edge_pairs(g4).count({i, j}) == (expected ? 1u : 0u));
        }

    CHECK_THROWS_AS(build_window_path(3, 3), ParameterError);
    CHECK_THROWS_AS(build_window_path(3, 0), ParameterError);
}

TEST_CASE("build_cycle_power") {
    const Graph c4 = build_cycle_power(4, 1);
    CHECK(c4.edge_count() == 8);

    const Graph c5 = build_cycle_power(5, 2);
    const Graph k5 = build_complete(5);
    CHECK(edge_pairs(c5) == edge_pairs(k5));

    for (Index n = 5; n <= 12; ++n)
        for (Index w = 1; 2 * w < n; ++w) {
            const Matrix W = build_cycle_power(n, w).adjacency();
            for (Index i = 0; i < n; ++i) CHECK(W.row(i).sum() == static_cast<double>(2 * w));
        }

    CHECK_THROWS_AS(build_cycle_power(6, 3), ParameterError);
}

TEST_CASE("laplacians") {
    Matrix expected(2, 2);
    expected << 1, -1, -1, 1;
    const auto l2 = laplacians(build_window_path(2, 1));
    CHECK(l2.L == expected);
    CHECK(l2.L_sym == expected);

    const auto l1 = laplacians(build_edgeless(1));
    CHECK(l1.L == Matrix::Zero(1, 1));

    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = 2 + static_cast<Index>(rng.below(8));
        std::vector<Edge> edges;
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j)
                if (i != j && rng.uniform() < 0.4) edges.push_back({i, j, 0.1 + rng.uniform()});
        const Graph g(n, edges);
        const auto l = laplacians(g);
        CHECK(max_abs(l.L - oracle::laplacian_from_edges(n, edges)) <= 1e-15);
        CHECK(l.L.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(max_abs(l.L_sym - l.L_sym.transpose()) == 0.0);

        // self-loops leave the Laplacian unchanged, exactly
        std::vector<Edge> looped = edges;
        for (Index i = 0; i < n; ++i)
            if (rng.uniform() < 0.5) looped.push_back({i, i, 0.5 + rng.uniform()});
        const auto ll = laplacians(Graph(n, looped));
        CHECK(ll.L == l.L);
        CHECK(ll.L_sym == l.L_sym);
    }
}

TEST_CASE("L_sym is PSD and matches the energy on balanced graphs") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = 2 + static_cast<Index>(rng.below(10));
        std::vector<Edge> edges;
        for (Index i = 0; i < n; ++i)
            for (Index j = i + 1; j < n; ++j)
                if (rng.uniform() < 0.5) {
                    const double w = 0.1 + rng.uniform();
                    edges.push_back({i, j, w});
                    edges.push_back({j, i, w});
                }
        const Graph g(n, edges);
        const auto l = laplacians(g);
        CHECK(sym_eigenvalues(l.L_sym)(0) >= -1e-10);
        const Matrix u = oracle::random_matrix(rng, n, 1);
        CHECK(std::abs((u.transpose() * l.L_sym * u)(0, 0) - energy(g, u)) <= 1e-10);
    }
    // window paths and cycle powers are balanced too
    for (Index n = 5; n <= 20; n += 5) {
        const Graph g = build_window_path(n, 2);
        const Matrix u = oracle::random_matrix(rng, n, 1);
        CHECK(std::abs((u.transpose() * laplacians(g).L_sym * u)(0, 0) - energy(g, u)) <= 1e-10);
    }
}

TEST_CASE("fiedler_value") {
    CHECK(fiedler_value(build_complete(5)) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(fiedler_value(build_edgeless(4)) == 0.0);
    CHECK(fiedler_value(build_window_path(3, 1)) == doctest::Approx(1.0).epsilon(1e-12));
    // disconnected: two copies of P_3
    CHECK(fiedler_value(build_window_path(3, 1).disjoint_union(2)) == 0.0);
}

TEST_CASE("cycle_power_lambda1 closed form") {
    CHECK(std::abs(cycle_power_lambda1(4, 1) - 2.0) <= 1e-12);
    CHECK(std::abs(cycle_power_lambda1(5, 2) - 5.0) <= 1e-12);
    const Vector c4 = oracle::eigenvalues(laplacians(build_cycle_power(4, 1)).L_sym);
    CHECK(std::abs(c4(0)) <= 1e-12);
    CHECK(std::abs(c4(1) - 2.0) <= 1e-12);
    CHECK(std::abs(c4(2) - 2.0) <= 1e-12);
    CHECK(std::abs(c4(3) - 4.0) <= 1e-12);

    double prev = 0.0;
    for (Index w = 1; w <= 15; ++w) {
        const double v = cycle_power_lambda1(32, w);
        CHECK(v > prev);
        prev = v;
    }
    CHECK_THROWS_AS(cycle_power_lambda1(6, 3), ParameterError);

    for (Index n = 3; n <= 24; ++n)
        for (Index w = 1; 2 * w < n; ++w) {
            const Graph g = build_cycle_power(n, w);
            CHECK(std::abs(cycle_power_lambda1(n, w) - oracle::fiedler(n, g.edges())) <= 1e-9);
        }
}

TEST_CASE("path_fiedler_bounds") {
    const auto b3 = path_fiedler_bounds(3, 1);
    CHECK(std::abs(b3.lower - 0.5) <= 1e-15);
    CHECK(std::abs(b3.upper - 1.0) <= 1e-15);
    CHECK(std::abs(fiedler_value(build_window_path(3, 1)) - b3.upper) <= 1e-12);

    CHECK_THROWS_AS(path_fiedler_bounds(2, 1), ParameterError);

    const auto b64 = path_fiedler_bounds(64, 4);
    const double f64 = oracle::fiedler(64, build_window_path(64, 4).edges());
    CHECK(b64.lower <= f64);
    CHECK(f64 <= b64.upper);

    for (Index n = 3; n <= 24; ++n)
        for (Index w = 1; 2 * w < n; ++w) {
            const auto b = path_fiedler_bounds(n, w);
            CHECK(b.upper == 2.0 * b.lower);
            CHECK(b.lower > 0.0);
            const double f = fiedler_value(build_window_path(n, w));
            CHECK(b.lower <= f + 1e-12);
            CHECK(f <= b.upper + 1e-12);
        }
}

TEST_CASE("count_zero_eigenvalues threshold") {
    Vector ev(4);
    ev << 0.0, 5e-10, 2e-9, 1.0;
    CHECK(count_zero_eigenvalues(ev) == 2);
    ev << 0.0, 5e-10, 2e-9, 1e3;  // threshold scales with λ_max: 1e-6
    CHECK(count_zero_eigenvalues(ev) == 3);
}

TEST_CASE("BlockGraph validation and block Laplacian") {
    const Matrix I2 = Matrix::Identity(2, 2);
    const BlockGraph bg(2, 2, {{0, 1, I2}, {1, 0, I2}});
    const auto bl = block_laplacian(bg);
    const Vector ev = oracle::eigenvalues(bl.L_sym);
    Vector expected(4);
    expected << 0, 0, 2, 2;
    CHECK(max_abs(ev - expected) <= 1e-12);

    Matrix not_pd(2, 2);
    not_pd << 1, 0, 0, -1;
    CHECK_THROWS_AS(BlockGraph(2, 2, {{0, 1, not_pd}}), DefinitenessError);
    Matrix asym(2, 2);
    asym << 2, 1, 0, 2;
    CHECK_THROWS_AS(BlockGraph(2, 2, {{0, 1, asym}}), SymmetryError);
    CHECK_THROWS_AS(BlockGraph(2, 2, {{0, 1, Matrix::Identity(3, 3)}}), DimensionError);

    Rng rng(8);
    // d = 1 reduces exactly to the scalar Laplacian
    {
        const Graph g = build_window_path(6, 2);
        std::vector<BlockEdge> be;
        for (const auto& e : g.edges()) be.push_back({e.src, e.dst, Matrix::Constant(1, 1, e.weight)});
        const auto bl1 = block_laplacian(BlockGraph(6, 1, be));
        const auto sl = laplacians(g);
        CHECK(bl1.L == sl.L);
        CHECK(bl1.L_sym == sl.L_sym);
    }
    // connected graphs with random SPD blocks (W_ij = W_ji) have exactly d zero eigenvalues
    for (Index d = 1; d <= 4; ++d) {
        for (int trial = 0; trial < 5; ++trial) {
            const Index n = 3 + static_cast<Index>(rng.below(5));
            std::vector<BlockEdge> be;
            for (Index i = 0; i < n; ++i)
                for (Index j = i + 1; j < n && j <= i + 2; ++j) {
                    const Matrix block = oracle::random_spd(rng, d);
                    be.push_back({i, j, block});
                    be.push_back({j, i, block});
                }
            const Graph g = build_edgeless(n);
            const BlockGraph bgd(g.n(), d, be);
            const auto L = block_laplacian(bgd);
            CHECK(count_zero_eigenvalues(sym_eigenvalues(L.L_sym)) == d);
            CHECK(oracle::eigenvalues(L.L_sym)(0) >= -1e-10);
        }
    }
}

TEST_CASE("bipartite window") {
    const auto b0 = build_bipartite_window(5, 0);
    CHECK(b0.edges.size() == 5);
    for (const auto& e : b0.edges) CHECK(e.src == e.dst);
    const auto b2 = build_bipartite_window(6, 2);
    for (const auto& e : b2.edges) CHECK(std::abs(e.src - e.dst) <= 2);
    CHECK(b2.edges.size() == 6 + 2 * 5 + 2 * 4);
}

TEST_CASE("graph text round trip") {
    Rng rng(13);
    std::vector<Edge> edges;
    for (Index i = 0; i < 6; ++i)
        for (Index j = 0; j < 6; ++j)
            if (i != j && rng.uniform() < 0.5) edges.push_back({i, j, rng.uniform() * 10.0 + 1e-300});
    edges.push_back({0, 0, 0.1});  // self-loop
    const Graph g(6, edges);
    std::stringstream ss;
    write_graph(ss, g);
    const Graph back = read_graph(ss);
    CHECK(back == g);

    std::stringstream bad("n 3\nedge 0 5 1\n");
    CHECK_THROWS(read_graph(bad));
}
