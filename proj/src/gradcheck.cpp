#include "consensus/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "consensus/attention.hpp"
#include "consensus/consensus.hpp"
#include "consensus/csv.hpp"
#include "consensus/derivatives.hpp"
#include "consensus/model.hpp"

namespace consensus {
namespace {

std::string block_of(const std::string& slot) {
    if (slot.rfind("l", 0) == 0 && slot.size() > 1 && std::isdigit(static_cast<unsigned char>(slot[1]))) {
        const auto first = slot.find('.');
        const auto second = first == std::string::npos ? first : slot.find('.', first + 1);
        return slot.substr(0, second);
    }
    if (slot.rfind("ln_f", 0) == 0) return "ln_f";
    if (slot.rfind("head", 0) == 0) return "head";
    return slot;
}

template <typename LossFn>
void check(std::vector<GradCheckRow>& out, const std::string& mechanism, const LossFn& loss_fn,
           const ParameterStore& store, const Vector& theta, const GradCheckOptions& opt, bool by_slot) {
    const GradResult g = grad(loss_fn, store, theta);
    Vector analytic = g.gradient;
    if (opt.inject_bug) analytic *= 1.0 + 1e-3;

    std::map<std::string, std::pair<double, double>> stats;  // block -> (max |a - f|, max |f|)
    std::vector<std::string> order;
    Vector x = theta;
    for (const auto& s : store.slots()) {
        const std::string block = by_slot ? s.name : block_of(s.name);
        if (!stats.count(block)) {
            stats[block] = {0.0, 0.0};
            order.push_back(block);
        }
        auto& [diff, scale] = stats[block];
        for (Index i = s.offset; i < s.offset + s.size(); ++i) {
            const double h = opt.step * std::max(1.0, std::abs(theta(i)));
            x(i) = theta(i) + h;
            const double fp = loss_value(loss_fn, store, x);
            x(i) = theta(i) - h;
            const double fm = loss_value(loss_fn, store, x);
            x(i) = theta(i);
            const double fd = (fp - fm) / (2.0 * h);
            diff = std::max(diff, std::abs(analytic(i) - fd));
            scale = std::max(scale, std::abs(fd));
        }
    }
    for (const auto& b : order) {
        const auto [diff, scale] = stats[b];
        GradCheckRow r;
        r.mechanism = mechanism;
        r.block = b;
        r.max_rel_err = g.finite ? diff / std::max(scale, 1e-8) : std::nan("");
        r.passed = g.finite && r.max_rel_err <= opt.tolerance;
        out.push_back(r);
    }
}

Matrix random_matrix(Rng& rng, Index r, Index c) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

void consensus_cases(std::vector<GradCheckRow>& out, const GradCheckOptions& opt) {
    constexpr Index n = 6, d = 4;
    for (const bool cross : {false, true}) {
        for (const Index heads : {Index{1}, Index{2}}) {
            ConsensusHyper hy;
            hy.d = d;
            hy.heads = heads;
            hy.rank = 2;
            hy.edge_hidden = 3;
            hy.eta = 0.2;
            hy.rope = true;
            hy.cross = cross;
            Rng rng = Rng(opt.seed).split(std::string("consensus") + (cross ? "-cross" : "-self") + std::to_string(heads));
            ParameterStore store;
            add_consensus_params(store, "", hy);
            init_consensus_params(store, "", hy, rng);
            store.add("input", n, d);
            if (cross) store.add("context", n, d);
            Vector theta = store.values();
            for (const char* s : {"input", "context"}) {
                if (!store.contains(s)) continue;
                const auto& slot = store.slot(s);
                for (Index i = 0; i < slot.size(); ++i) theta(slot.offset + i) = rng.normal();
            }
            // perturb biases off zero so their adjoints are exercised at a generic point
            for (const auto& slot : store.slots())
                if (slot.name.find(".b") != std::string::npos || slot.name.rfind("b_", 0) == 0)
                    for (Index i = 0; i < slot.size(); ++i) theta(slot.offset + i) = 0.1 * rng.normal();
            const Matrix w = random_matrix(rng, n, d);
            const EdgeIndex edges = cross ? EdgeIndex::from(build_bipartite_window(n, 1))
                                          : EdgeIndex::from(build_window_path(n, 2));
            auto fn = [&](auto& t, const auto& p) {
                (void)t;
                auto y = cross ? cross_consensus(p, "", hy, p["input"], p["context"], edges)
                               : self_consensus(p, "", hy, p["input"], edges);
                return ad::dot_const(y, w);
            };
            const std::string name = std::string(cross ? "cross-consensus" : "self-consensus") +
                                     (heads > 1 ? "-multihead" : "");
            check(out, name, fn, store, theta, opt, true);
        }
    }
}

void attention_cases(std::vector<GradCheckRow>& out, const GradCheckOptions& opt) {
    constexpr Index n = 6, d = 4;
    for (const std::string kind : {"self-attention", "sliding-window", "cross-attention"}) {
        AttentionHyper hy;
        hy.d = d;
        hy.heads = 2;
        hy.window = 1;
        hy.rope = true;
        Rng rng = Rng(opt.seed).split(kind);
        ParameterStore store;
        add_attention_params(store, "", hy);
        init_attention_params(store, "", hy, rng);
        store.add("input", n, d);
        store.add("context", n, d);
        Vector theta = store.values();
        for (const auto& slot : store.slots())
            for (Index i = 0; i < slot.size(); ++i)
                theta(slot.offset + i) += (slot.name == "input" || slot.name == "context" ? 1.0 : 0.1) * rng.normal();
        const Matrix w = random_matrix(rng, n, d);
        auto fn = [&](auto& t, const auto& p) {
            (void)t;
            if (kind == "self-attention") return ad::dot_const(self_attention(p, "", hy, p["input"]), w);
            if (kind == "sliding-window") return ad::dot_const(sliding_window_attention(p, "", hy, p["input"]), w);
            return ad::dot_const(cross_attention(p, "", hy, p["input"], p["context"]), w);
        };
        check(out, kind, fn, store, theta, opt, true);
    }
}

void model_cases(std::vector<GradCheckRow>& out, const GradCheckOptions& opt) {
    for (const Layout layout : {Layout::SA, Layout::SC, Layout::SW, Layout::MIX}) {
        ModelConfig mc;
        mc.layers = 2;
        mc.heads = 2;
        mc.d = 4;
        mc.seq_len = 6;
        mc.vocab = 5;
        mc.layout = layout;
        mc.rank = 2;
        mc.edge_hidden = 3;
        Model model(mc);
        Rng rng = Rng(opt.seed).split("model-" + to_string(layout));
        model.initialize(rng);
        Batch b;
        b.batch = 2;
        b.seq_len = mc.seq_len;
        for (Index k = 0; k < b.batch * b.seq_len; ++k) {
            b.tokens.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(mc.vocab))));
            if (k % 2 == 0) {
                b.positions.push_back(k);
                b.targets.push_back(b.tokens.back());
                b.tokens.back() = mc.mask_token();
            }
        }
        // a generic point: tiny init embeddings make layer norm curvature swamp the difference quotient
        Vector theta = model.params().values();
        for (Index i = 0; i < theta.size(); ++i) theta(i) += 0.3 * rng.normal();
        check(out, "model-" + to_string(layout), model.loss_fn(b), model.params(), theta, opt, false);
    }
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(const GradCheckOptions& options) {
    std::vector<GradCheckRow> rows;
    consensus_cases(rows, options);
    attention_cases(rows, options);
    model_cases(rows, options);
    return rows;
}

void write_gradcheck_csv(std::ostream& os, const std::vector<GradCheckRow>& rows) {
    CsvWriter csv(os);
    csv.header({"mechanism", "block", "max_rel_err", "passed"});
    for (const auto& r : rows) csv.row(r.mechanism, r.block, r.max_rel_err, r.passed);
}

}  // namespace consensus
