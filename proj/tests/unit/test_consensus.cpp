#include "doctest.h"
#include "oracles.hpp"

#include <cmath>

#include "consensus/consensus.hpp"
#include "consensus/derivatives.hpp"
#include "consensus/filter.hpp"

using namespace consensus;

namespace {

ConsensusHyper small_hyper(Index d = 4, Index heads = 1, bool cross = false, bool rope = false) {
    ConsensusHyper h;
    h.d = d;
    h.heads = heads;
    h.rank = 2;
    h.edge_hidden = 6;
    h.eta = 0.1;
    h.cross = cross;
    h.rope = rope;
    return h;
}

/// Random weights and biases everywhere.
ParameterStore random_store(const ConsensusHyper& h, Rng& rng, double scale = 0.7) {
    ParameterStore store;
    add_consensus_params(store, "c.", h);
    for (Index k = 0; k < store.size(); ++k) store.values()(k) = scale * rng.normal();
    return store;
}

Matrix affine(const Matrix& x, const ParameterStore& s, const std::string& w, const std::string& b) {
    Matrix out = x * s.get(w).transpose();
    out.rowwise() += s.get(b).row(0);
    return out;
}

Vector flat(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

TEST_CASE("reshape and row norm") {
    Vector v(4);
    v << 1, 2, 3, 4;
    Matrix expected(2, 2);
    expected << 1, 2, 3, 4;
    CHECK(reshape_rs(v, 2, 2) == expected);
    CHECK(reshape_rs(v, 1, 4) == v.transpose());
    CHECK_THROWS_AS(reshape_rs(Vector::Zero(5), 2, 2), DimensionError);

    Matrix m(1, 2);
    m << 3, 4;
    CHECK(std::abs(row_norm_rn(m)(0, 0) - 0.6) <= 1e-15);
    CHECK(std::abs(row_norm_rn(m)(0, 1) - 0.8) <= 1e-15);
    CHECK(row_norm_rn(Matrix::Zero(1, 2)) == Matrix::Zero(1, 2));
    Matrix unit(2, 2);
    unit << 1, 0, std::sqrt(0.5), std::sqrt(0.5);
    CHECK(max_abs(row_norm_rn(unit) - unit) <= 1e-15);
}

TEST_CASE("hyperparameter validation") {
    CHECK_THROWS_AS(small_hyper(6, 4).validate(), ConfigurationError);
    ConsensusHyper h = small_hyper();
    h.eta = 0.0;
    CHECK_THROWS_AS(h.validate(), ConfigurationError);
    h = small_hyper();
    h.rank = 0;
    CHECK_THROWS_AS(h.validate(), ConfigurationError);
    h = small_hyper(3, 1, false, true);
    CHECK_THROWS_AS(h.validate(), ConfigurationError);
}

TEST_CASE("SCWM at zero parameters") {
    const ConsensusHyper h = small_hyper();
    ParameterStore store;
    add_consensus_params(store, "c.", h);
    Rng rng(1);
    const Matrix y = oracle::random_matrix(rng, 5, 4);
    const auto w = scwm(y, build_window_path(5, 2), store, "c.", h);
    CHECK(w.size() == build_window_path(5, 2).edge_count());
    for (const auto& e : w) {
        CHECK(std::abs(e.alpha - std::log(2.0)) <= 1e-15);
        CHECK(std::abs(e.beta - std::log(2.0)) <= 1e-15);
        CHECK(max_abs(e.lambda) == 0.0);
    }
}

TEST_CASE("R matrices are PD with spectrum in [alpha, alpha + beta]") {
    Rng rng(2);
    int draws = 0;
    for (int trial = 0; trial < 25; ++trial) {
        const ConsensusHyper h = small_hyper(4, 2, true);
        const ParameterStore store = random_store(h, rng, 1.0);
        const Matrix y = oracle::random_matrix(rng, 4, 4);
        const Matrix c = oracle::random_matrix(rng, 4, 4);
        for (Index head = 0; head < 2; ++head) {
            auto sw = scwm(y, build_window_path(4, 1), store, "c.", h, head);
            auto cw = ccwm(y, c, build_bipartite_window(4, 1), store, "c.", h, head);
            sw.insert(sw.end(), cw.begin(), cw.end());
            for (const auto& e : sw) {
                ++draws;
                CHECK(e.alpha > 0.0);
                CHECK(e.beta > 0.0);
                CHECK(max_abs(e.r_matrix - e.r_matrix.transpose()) <= 1e-12);
                const Vector ev = oracle::eigenvalues(e.r_matrix);
                CHECK(ev(0) >= e.alpha - 1e-10);
                CHECK(ev(ev.size() - 1) <= e.alpha + e.beta + 1e-10);
                const Matrix expected = e.alpha * Matrix::Identity(2, 2) + e.beta * e.lambda.transpose() * e.lambda;
                CHECK(max_abs(e.r_matrix - expected) <= 1e-15);
            }
        }
    }
    CHECK(draws >= 100);
}

TEST_CASE("opposite directions get independent weights") {
    Rng rng(3);
    const ConsensusHyper h = small_hyper();
    const ParameterStore store = random_store(h, rng);
    const Matrix y = oracle::random_matrix(rng, 2, 4);
    const Graph g = build_window_path(2, 1);
    const auto w = scwm(y, g, store, "c.", h);
    REQUIRE(w.size() == 2);
    CHECK(max_abs(w[0].r_matrix - w[1].r_matrix) > 1e-6);
}

TEST_CASE("CCWM with c = y and mirrored edges equals SCWM") {
    Rng rng(4);
    const ConsensusHyper h = small_hyper(4, 1, true);
    const ParameterStore store = random_store(h, rng);
    const Matrix y = oracle::random_matrix(rng, 5, 4);
    const Graph g = build_window_path(5, 2);
    BipartiteGraph bg{5, 5, g.edges()};
    const auto sw = scwm(y, g, store, "c.", h);
    const auto cw = ccwm(y, y, bg, store, "c.", h);
    REQUIRE(sw.size() == cw.size());
    for (std::size_t k = 0; k < sw.size(); ++k) CHECK(sw[k].r_matrix == cw[k].r_matrix);

    ParameterStore zero;
    add_consensus_params(zero, "c.", h);
    for (const auto& e : ccwm(y, y, build_bipartite_window(5, 1), zero, "c.", h)) {
        CHECK(std::abs(e.alpha - std::log(2.0)) <= 1e-15);
        CHECK(std::abs(e.beta - std::log(2.0)) <= 1e-15);
    }
    CHECK(ccwm(y, y, BipartiteGraph{5, 5, {}}, store, "c.", h).empty());
    CHECK_THROWS_AS(ccwm(y, y, BipartiteGraph{5, 5, {{0, 7, 1.0}}}, store, "c.", h), ParameterError);
}

TEST_CASE("self-consensus forward contracts") {
    Rng rng(5);
    const ConsensusHyper h = small_hyper();
    const ParameterStore store = random_store(h, rng);
    const Matrix y = oracle::random_matrix(rng, 6, 4);

    // edgeless: g = 0
    const Matrix plain = affine(affine(y, store, "c.w_s", "c.b_s"), store, "c.w_o", "c.b_o");
    CHECK(max_abs(self_consensus_forward(y, build_edgeless(6), store, "c.", h) - plain) <= 1e-14);
    CHECK(max_abs(multi_head_self_consensus(y, build_edgeless(6), store, "c.", h) - plain) <= 1e-14);

    // output shape
    const Matrix out = self_consensus_forward(y, build_window_path(6, 2), store, "c.", h);
    CHECK(out.rows() == 6);
    CHECK(out.cols() == 4);

    CHECK_THROWS_AS(self_consensus_forward(oracle::random_matrix(rng, 5, 4), build_window_path(6, 2), store, "c.", h),
                    DimensionError);
    CHECK_THROWS_AS(self_consensus_forward(oracle::random_matrix(rng, 6, 3), build_window_path(6, 2), store, "c.", h),
                    DimensionError);
}

TEST_CASE("constant input with tied edge MLPs gives zero update") {
    Rng rng(6);
    const ConsensusHyper h = small_hyper();
    const ParameterStore store = random_store(h, rng);
    const Matrix y = Matrix::Ones(7, 1) * oracle::random_matrix(rng, 1, 4);
    const Matrix out = self_consensus_forward(y, build_window_path(7, 2), store, "c.", h);
    const Matrix plain = affine(affine(y, store, "c.w_s", "c.b_s"), store, "c.w_o", "c.b_o");
    CHECK(max_abs(out - plain) <= 1e-14);
    for (Index i = 1; i < 7; ++i) CHECK(max_abs(out.row(i) - out.row(0)) <= 1e-14);
}

TEST_CASE("translation invariance: b_s cancels in the update") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const ConsensusHyper h = small_hyper();
        const ParameterStore store = random_store(h, rng);
        const Matrix y = oracle::random_matrix(rng, 6, 4);
        const Graph g = build_window_path(6, 2);
        const auto w = scwm(y, g, store, "c.", h);
        const Matrix u = oracle::random_matrix(rng, 6, 4);
        const Matrix delta = Matrix::Ones(6, 1) * oracle::random_matrix(rng, 1, 4, 3.0);
        CHECK(max_abs(self_consensus_update(u + delta, g, w) - self_consensus_update(u, g, w)) <= 1e-12);

        ParameterStore shifted = store;
        const Matrix db = oracle::random_matrix(rng, 1, 4);
        shifted.get("c.b_s") += db;
        const Matrix diff = self_consensus_forward(y, g, shifted, "c.", h) - self_consensus_forward(y, g, store, "c.", h);
        const Matrix expected = Matrix::Ones(6, 1) * (db * store.get("c.w_o").transpose());
        CHECK(max_abs(diff - expected) <= 1e-12);
    }
}

TEST_CASE("the consensus update is a gradient step on the consensus energy") {
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const ConsensusHyper h = small_hyper();
        const ParameterStore store = random_store(h, rng);
        const Graph g = build_window_path(6, 2);
        const Matrix y = oracle::random_matrix(rng, 6, 4);
        const auto w = scwm(y, g, store, "c.", h);

        auto energy_of = [&](const Matrix& u) {
            double e = 0.0;
            for (std::size_t k = 0; k < w.size(); ++k) {
                const auto& edge = g.edges()[k];
                const Vector d = (u.row(edge.src) - u.row(edge.dst)).transpose();
                e += 0.5 * d.dot(w[k].r_matrix * d);
            }
            return e;
        };
        const Matrix u = oracle::random_matrix(rng, 6, 4);
        const Matrix gu = self_consensus_update(u, g, w);
        const Vector fd = oracle::fd_gradient(
            [&](const Vector& x) { return energy_of(Eigen::Map<const Matrix>(x.data(), 6, 4)); }, flat(u));
        CHECK(oracle::rel_error(flat(gu), fd) <= 1e-6);

        // frozen weights as a block graph with S_ij = (R_ij + R_ji)/2 on both directions
        std::vector<BlockEdge> be;
        for (std::size_t k = 0; k < w.size(); ++k) {
            const auto& e = g.edges()[k];
            Matrix s = 0.5 * w[k].r_matrix;
            for (std::size_t m = 0; m < w.size(); ++m)
                if (g.edges()[m].src == e.dst && g.edges()[m].dst == e.src) s += 0.5 * w[m].r_matrix;
            be.push_back({e.src, e.dst, s});
        }
        const BlockGraph bg(6, 4, be);
        CHECK(std::abs(energy(bg, u) - energy_of(u)) <= 1e-10);
        const double thr = non_oscillation_threshold(bg);
        for (double frac : {0.25, 0.5, 1.0}) {
            const Matrix next = u - frac * thr * gu;
            CHECK(energy_of(next) <= energy_of(u) + 1e-12);
        }
    }
}

TEST_CASE("multi-head with H = 1 matches the single-head forms") {
    Rng rng(9);
    for (bool rope : {false, true}) {
        const ConsensusHyper h = small_hyper(4, 1, true, rope);
        const ParameterStore store = random_store(h, rng);
        const Matrix y = oracle::random_matrix(rng, 7, 4);
        const Matrix c = oracle::random_matrix(rng, 5, 4);
        const Graph g = build_window_path(7, 2);
        CHECK(max_abs(multi_head_self_consensus(y, g, store, "c.", h) - self_consensus_forward(y, g, store, "c.", h)) <=
              1e-12);
        BipartiteGraph bg{7, 5, {}};
        for (Index i = 0; i < 7; ++i)
            for (Index j = 0; j < 5; ++j)
                if (std::abs(i - j) <= 1) bg.edges.push_back({i, j, 1.0});
        CHECK(max_abs(multi_head_cross_consensus(y, c, bg, store, "c.", h) -
                      cross_consensus_forward(y, c, bg, store, "c.", h)) <= 1e-12);
    }
}

TEST_CASE("each head updates only its own slice") {
    Rng rng(10);
    const ConsensusHyper h = small_hyper(4, 2);
    ParameterStore store = random_store(h, rng);
    store.get("c.w_o") = Matrix::Identity(4, 4);
    store.get("c.b_o").setZero();
    for (const char* phi : {"alpha", "beta", "lambda"})
        for (const char* part : {"w1", "b1", "w", "b"}) store.get(std::string("c.h1.") + phi + "." + part).setZero();
    const Matrix y = oracle::random_matrix(rng, 6, 4);
    const Graph g = build_window_path(6, 2);
    const Matrix out = multi_head_self_consensus(y, g, store, "c.", h);

    const Matrix u = affine(y, store, "c.w_s", "c.b_s");
    const auto w0 = scwm(y, g, store, "c.", h, 0);
    const Matrix u0 = u.leftCols(2);
    const Matrix expected0 = u0 - h.eta * self_consensus_update(u0, g, w0);
    CHECK(max_abs(out.leftCols(2) - expected0) <= 1e-12);

    // head 1 has α = β = ln 2 and Λ = 0, so R = ln 2 · I
    const auto w1 = scwm(y, g, store, "c.", h, 1);
    for (const auto& e : w1) CHECK(max_abs(e.r_matrix - std::log(2.0) * Matrix::Identity(2, 2)) <= 1e-15);
    const Matrix u1 = u.rightCols(2);
    CHECK(max_abs(out.rightCols(2) - (u1 - h.eta * self_consensus_update(u1, g, w1))) <= 1e-12);
}

TEST_CASE("cross-consensus contracts") {
    Rng rng(11);
    const ConsensusHyper h = small_hyper(4, 2, true);
    ParameterStore store = random_store(h, rng);
    const Matrix y = oracle::random_matrix(rng, 5, 4);
    const Matrix c = oracle::random_matrix(rng, 6, 4);

    // empty edge set: context ignored entirely
    const BipartiteGraph none{5, 6, {}};
    const Matrix plain = affine(affine(y, store, "c.w_s", "c.b_s"), store, "c.w_o", "c.b_o");
    CHECK(max_abs(multi_head_cross_consensus(y, c, none, store, "c.", h) - plain) <= 1e-14);
    CHECK(max_abs(multi_head_cross_consensus(y, 3.0 * c, none, store, "c.", h) - plain) <= 1e-14);

    // zero disagreement: v_j = u_i on every edge
    {
        ConsensusHyper h1 = small_hyper(4, 1, true);
        ParameterStore s1 = random_store(h1, rng);
        s1.get("c.w_c") = s1.get("c.w_s");
        s1.get("c.b_c") = s1.get("c.b_s");
        const BipartiteGraph diag = build_bipartite_window(5, 0);
        const Matrix plain1 = affine(affine(y, s1, "c.w_s", "c.b_s"), s1, "c.w_o", "c.b_o");
        CHECK(max_abs(cross_consensus_forward(y, y, diag, s1, "c.", h1) - plain1) <= 1e-13);
    }

    // cross-head zero influence: weights made independent of the context, W_c = I, W_o = I
    store.get("c.w_c") = Matrix::Identity(4, 4);
    store.get("c.b_c").setZero();
    store.get("c.w_o") = Matrix::Identity(4, 4);
    store.get("c.b_o").setZero();
    for (Index head = 0; head < 2; ++head)
        for (const char* phi : {"alpha", "beta", "lambda"})
            store.get("c.h" + std::to_string(head) + "." + phi + ".w1").rightCols(4).setZero();
    const BipartiteGraph bg = [] {
        BipartiteGraph b{5, 6, {}};
        for (Index i = 0; i < 5; ++i)
            for (Index j = 0; j < 6; ++j)
                if (std::abs(i - j) <= 2) b.edges.push_back({i, j, 1.0});
        return b;
    }();
    const Matrix base = multi_head_cross_consensus(y, c, bg, store, "c.", h);
    Matrix c_perturbed = c;
    c_perturbed.col(3) += oracle::random_matrix(rng, 6, 1);  // head-1 slice
    const Matrix moved = multi_head_cross_consensus(y, c_perturbed, bg, store, "c.", h);
    CHECK(max_abs(moved.leftCols(2) - base.leftCols(2)) == 0.0);
    CHECK(max_abs(moved.rightCols(2) - base.rightCols(2)) > 1e-6);
}

TEST_CASE("RoPE rotation") {
    Rng rng(12);
    const Matrix u = oracle::random_matrix(rng, 17, 8);
    const Matrix r = rope_rotate(u, 10000.0);
    for (Index i = 0; i < 17; ++i) CHECK(std::abs(r.row(i).norm() - u.row(i).norm()) <= 1e-12);
    CHECK(r.row(0) == u.row(0));

    Matrix e(1, 2);
    e << 1, 0;
    const double quarter = std::acos(-1.0) / 2.0;
    const Matrix q = rope_rotate(e, 10000.0, {quarter});
    CHECK(std::abs(q(0, 0)) <= 1e-15);
    CHECK(std::abs(q(0, 1) - 1.0) <= 1e-15);

    for (int trial = 0; trial < 200; ++trial) {
        const Matrix a = oracle::random_matrix(rng, 1, 8);
        const Matrix b = oracle::random_matrix(rng, 1, 8);
        const double i = static_cast<double>(rng.below(17));
        const double j = static_cast<double>(rng.below(17));
        const double lhs = rope_rotate(a, 100.0, {i}).row(0).dot(rope_rotate(b, 100.0, {j}).row(0));
        const double rhs = rope_rotate(a, 100.0, {i - j}).row(0).dot(b.row(0));
        CHECK(std::abs(lhs - rhs) <= 1e-10);
    }
    CHECK_THROWS_AS(rope_rotate(Matrix::Zero(2, 3), 10000.0), ConfigurationError);

    ad::Tape<double> tape;
    std::vector<double> pos(17);
    for (int k = 0; k < 17; ++k) pos[static_cast<std::size_t>(k)] = k;
    CHECK(max_abs(ad::rope(tape.constant(u), pos, 10000.0, 8).value() - r) <= 1e-15);
}

TEST_CASE("consensus gradients match central differences") {
    Rng rng(13);
    struct Case {
        Index heads;
        bool cross;
        bool rope;
    };
    for (const Case cs : {Case{1, false, false}, Case{1, true, false}, Case{2, false, true}, Case{2, true, true}}) {
        const ConsensusHyper h = small_hyper(4, cs.heads, cs.cross, cs.rope);
        ParameterStore store = random_store(h, rng, 0.5);
        const Matrix y = oracle::random_matrix(rng, 5, 4);
        const Matrix c = oracle::random_matrix(rng, 4, 4);
        const Matrix weight = oracle::random_matrix(rng, 5, 4);
        const EdgeIndex self_edges = EdgeIndex::from(build_window_path(5, 2));
        BipartiteGraph bg{5, 4, {}};
        for (Index i = 0; i < 5; ++i)
            for (Index j = 0; j < 4; ++j)
                if (std::abs(i - j) <= 1) bg.edges.push_back({i, j, 1.0});
        const EdgeIndex cross_edges = EdgeIndex::from(bg);

        auto loss = [&](auto& t, const auto& p) {
            using S = std::decay_t<decltype(t.value(p["c.w_s"])(0, 0))>;
            auto yv = t.constant(y.template cast<S>());
            auto out = cs.cross ? cross_consensus(p, "c.", h, yv, t.constant(c.template cast<S>()), cross_edges)
                                : self_consensus(p, "c.", h, yv, self_edges);
            return ad::add(ad::dot_const(out, weight), ad::scale(ad::sum_squares(out), 0.1));
        };
        const Vector theta = store.values();
        const GradResult g = grad(loss, store, theta);
        REQUIRE(g.finite);
        const Vector fd = oracle::fd_gradient([&](const Vector& x) { return loss_value(loss, store, x); }, theta);
        CHECK(oracle::rel_error(g.gradient, fd) <= 1e-5);
    }
}
