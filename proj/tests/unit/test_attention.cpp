#include "doctest.h"
#include "oracles.hpp"

#include <cmath>

#include "consensus/attention.hpp"
#include "consensus/derivatives.hpp"

using namespace consensus;

namespace {

AttentionHyper hyper(Index d = 4, Index heads = 2, Index window = 2, bool rope = true) {
    AttentionHyper h;
    h.d = d;
    h.heads = heads;
    h.window = window;
    h.rope = rope;
    return h;
}

ParameterStore random_store(const AttentionHyper& h, Rng& rng, double scale = 0.6) {
    ParameterStore store;
    add_attention_params(store, "a.", h);
    for (Index k = 0; k < store.size(); ++k) store.values()(k) = scale * rng.normal();
    return store;
}

Matrix value_rows(const Matrix& c, const ParameterStore& s) {
    Matrix v = c * s.get("a.w_v").transpose();
    v.rowwise() += s.get("a.b_v").row(0);
    Matrix out = v * s.get("a.w_o").transpose();
    out.rowwise() += s.get("a.b_o").row(0);
    return out;
}

enum class Kind { full, band, cross };

Matrix tape_forward(Kind kind, const Matrix& y, const Matrix& c, const ParameterStore& store, const AttentionHyper& h,
                    Index segment = 0) {
    ad::Tape<double> tape;
    Bound<double> p(tape, store, store.values(), false);
    switch (kind) {
        case Kind::full: return self_attention(p, "a.", h, tape.constant(y), segment).value();
        case Kind::band: return sliding_window_attention(p, "a.", h, tape.constant(y), segment).value();
        case Kind::cross: return cross_attention(p, "a.", h, tape.constant(y), tape.constant(c)).value();
    }
    return {};
}

}  // namespace

TEST_CASE("configuration") {
    CHECK_THROWS_AS(hyper(6, 4).validate(), ConfigurationError);
    CHECK_THROWS_AS(hyper(4, 1, -1).validate(), ConfigurationError);
    CHECK_THROWS_AS(hyper(6, 2, 2, true).validate(), ConfigurationError);
    CHECK_NOTHROW(hyper(6, 2, 2, false).validate());
}

TEST_CASE("single position and identical tokens") {
    Rng rng(1);
    const AttentionHyper h = hyper(4, 2, 2, false);
    const ParameterStore store = random_store(h, rng);
    const Matrix one = oracle::random_matrix(rng, 1, 4);
    const auto r = self_attention_forward(one, store, "a.", h);
    for (const auto& w : r.weights) CHECK(w(0, 0) == 1.0);
    CHECK(max_abs(r.output - value_rows(one, store)) <= 1e-14);

    const Matrix same = Matrix::Ones(5, 1) * one;
    for (const auto& w : self_attention_forward(same, store, "a.", h).weights)
        CHECK(max_abs(w - Matrix::Constant(5, 5, 0.2)) <= 1e-15);
}

TEST_CASE("weights are row-stochastic") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const AttentionHyper h = hyper(4, 2, 1 + trial % 3, trial % 2 == 0);
        const ParameterStore store = random_store(h, rng, 1.5);
        const Matrix y = oracle::random_matrix(rng, 7, 4, 2.0);
        const Matrix c = oracle::random_matrix(rng, 3, 4, 2.0);
        for (const auto& r : {self_attention_forward(y, store, "a.", h), sliding_window_attention_forward(y, store, "a.", h),
                              cross_attention_forward(y, c, store, "a.", h)}) {
            REQUIRE(r.weights.size() == 2);
            for (const auto& w : r.weights) {
                CHECK((w.array() >= 0.0).all());
                CHECK(max_abs(w.rowwise().sum() - Matrix::Ones(w.rows(), 1)) <= 1e-9);
            }
            CHECK(r.output.rows() == 7);
            CHECK(r.output.cols() == 4);
        }
    }
}

TEST_CASE("band structure") {
    Rng rng(3);
    const AttentionHyper h = hyper(4, 2, 2);
    const ParameterStore store = random_store(h, rng);
    const Matrix y = oracle::random_matrix(rng, 8, 4);
    const auto r = sliding_window_attention_forward(y, store, "a.", h);
    for (const auto& w : r.weights)
        for (Index i = 0; i < 8; ++i)
            for (Index j = 0; j < 8; ++j) {
                if (std::abs(i - j) > 2) CHECK(w(i, j) == 0.0);
                else CHECK(w(i, j) > 0.0);
            }

    AttentionHyper wide = h;
    wide.window = 7;
    CHECK(max_abs(sliding_window_attention_forward(y, store, "a.", wide).output -
                  self_attention_forward(y, store, "a.", h).output) <= 1e-14);
    CHECK(max_abs(tape_forward(Kind::band, y, y, store, wide) - tape_forward(Kind::full, y, y, store, h)) <= 1e-12);

    AttentionHyper self_only = h;
    self_only.window = 0;
    CHECK(max_abs(tape_forward(Kind::band, y, y, store, self_only) - value_rows(y, store)) <= 1e-12);
    for (const auto& w : sliding_window_attention_forward(y, store, "a.", self_only).weights)
        CHECK(w == Matrix::Identity(8, 8));
}

TEST_CASE("tape forms agree with the dense forms") {
    Rng rng(4);
    for (bool rope : {false, true}) {
        const AttentionHyper h = hyper(4, 2, 2, rope);
        const ParameterStore store = random_store(h, rng);
        const Matrix y = oracle::random_matrix(rng, 9, 4);
        const Matrix c = oracle::random_matrix(rng, 6, 4);
        CHECK(max_abs(tape_forward(Kind::full, y, c, store, h) - self_attention_forward(y, store, "a.", h).output) <=
              1e-12);
        CHECK(max_abs(tape_forward(Kind::band, y, c, store, h) -
                      sliding_window_attention_forward(y, store, "a.", h).output) <= 1e-12);
        CHECK(max_abs(tape_forward(Kind::cross, y, c, store, h) -
                      cross_attention_forward(y, c, store, "a.", h).output) <= 1e-12);

        // stacked sequences behave as independent sequences with restarted positions
        const Matrix y2 = oracle::random_matrix(rng, 9, 4);
        Matrix stacked(18, 4);
        stacked << y, y2;
        for (Kind kind : {Kind::full, Kind::band}) {
            const Matrix out = tape_forward(kind, stacked, stacked, store, h, 9);
            CHECK(max_abs(out.topRows(9) - tape_forward(kind, y, y, store, h)) <= 1e-12);
            CHECK(max_abs(out.bottomRows(9) - tape_forward(kind, y2, y2, store, h)) <= 1e-12);
        }
        CHECK_THROWS_AS(tape_forward(Kind::full, stacked, stacked, store, h, 7), DimensionError);
    }
}

TEST_CASE("cross-attention contracts") {
    Rng rng(5);
    const AttentionHyper h = hyper(4, 2, 2, false);
    const ParameterStore store = random_store(h, rng);
    const Matrix y = oracle::random_matrix(rng, 5, 4);
    const Matrix c1 = oracle::random_matrix(rng, 1, 4);
    const auto r = cross_attention_forward(y, c1, store, "a.", h);
    for (Index i = 0; i < 5; ++i) CHECK(max_abs(r.output.row(i) - value_rows(c1, store)) <= 1e-14);

    for (bool rope : {false, true}) {
        AttentionHyper hr = h;
        hr.rope = rope;
        const auto cross = cross_attention_forward(y, y, store, "a.", hr);
        const auto self = self_attention_forward(y, store, "a.", hr);
        for (std::size_t k = 0; k < cross.weights.size(); ++k) CHECK(max_abs(cross.weights[k] - self.weights[k]) <= 1e-15);
        CHECK(max_abs(cross.output - self.output) <= 1e-15);
    }
    CHECK_THROWS_AS(cross_attention_forward(y, Matrix(0, 4), store, "a.", h), DimensionError);
    CHECK_THROWS_AS(cross_attention_forward(y, Matrix::Zero(2, 3), store, "a.", h), DimensionError);
}

TEST_CASE("rotated queries keep their norms") {
    Rng rng(6);
    const Matrix q = oracle::random_matrix(rng, 16, 8);
    std::vector<double> pos(16);
    for (int i = 0; i < 16; ++i) pos[static_cast<std::size_t>(i)] = i;
    ad::Tape<double> tape;
    const Matrix r = ad::rope(tape.constant(q), pos, 10000.0, 4).value();
    for (Index i = 0; i < 16; ++i)
        for (Index head = 0; head < 2; ++head)
            CHECK(std::abs(r.row(i).segment(head * 4, 4).norm() - q.row(i).segment(head * 4, 4).norm()) <= 1e-12);
}

TEST_CASE("attention gradients match central differences") {
    Rng rng(7);
    for (Kind kind : {Kind::full, Kind::band, Kind::cross}) {
        const AttentionHyper h = hyper(4, 2, 1, true);
        const ParameterStore store = random_store(h, rng, 0.5);
        const Matrix y = oracle::random_matrix(rng, 6, 4);
        const Matrix c = oracle::random_matrix(rng, 4, 4);
        const Matrix weight = oracle::random_matrix(rng, 6, 4);
        auto loss = [&](auto& t, const auto& p) {
            using S = std::decay_t<decltype(t.value(p["a.w_q"])(0, 0))>;
            auto yv = t.constant(y.template cast<S>());
            auto out = kind == Kind::full   ? self_attention(p, "a.", h, yv, 3)
                       : kind == Kind::band ? sliding_window_attention(p, "a.", h, yv, 3)
                                            : cross_attention(p, "a.", h, yv, t.constant(c.template cast<S>()));
            return ad::add(ad::dot_const(out, weight), ad::scale(ad::sum_squares(out), 0.1));
        };
        const Vector theta = store.values();
        const GradResult g = grad(loss, store, theta);
        const Vector fd = oracle::fd_gradient([&](const Vector& x) { return loss_value(loss, store, x); }, theta);
        CHECK(oracle::rel_error(g.gradient, fd) <= 1e-5);

        const Vector v = oracle::random_matrix(rng, theta.size(), 1);
        if (kind == Kind::band) {
            CHECK_THROWS_AS(hvp_exact(loss, store, theta, v), CapabilityError);
        } else {
            const HvpResult exact = hvp_exact(loss, store, theta, v);
            const HvpResult fdh = hvp_fd(loss, store, theta, v);
            CHECK(oracle::rel_error(exact.hv, fdh.hv) <= 1e-4);
        }
    }
}
