#include "consensus/model.hpp"

#include <cmath>

namespace consensus {

namespace {

std::string layer_prefix(Index l) { return "l" + std::to_string(l) + "."; }

void fill_uniform(Eigen::Map<Matrix> m, double bound, Rng& rng) {
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-bound, bound);
}

}  // namespace

std::string to_string(Mechanism m) {
    switch (m) {
        case Mechanism::SA: return "SA";
        case Mechanism::SC: return "SC";
        case Mechanism::SW: return "SW";
    }
    return "?";
}

std::string to_string(Layout l) {
    switch (l) {
        case Layout::SA: return "SA";
        case Layout::SC: return "SC";
        case Layout::SW: return "SW";
        case Layout::MIX: return "MIX";
    }
    return "?";
}

Layout parse_layout(const std::string& s) {
    if (s == "SA") return Layout::SA;
    if (s == "SC") return Layout::SC;
    if (s == "SW") return Layout::SW;
    if (s == "MIX") return Layout::MIX;
    throw ConfigurationError("unknown layout '" + s + "' (expected SA, SC, SW or MIX)");
}

Mechanism parse_mechanism(const std::string& s) {
    if (s == "SA") return Mechanism::SA;
    if (s == "SC") return Mechanism::SC;
    if (s == "SW") return Mechanism::SW;
    throw ConfigurationError("unknown mechanism '" + s + "' (expected SA, SC or SW)");
}

std::vector<Mechanism> ModelConfig::mechanisms() const {
    std::vector<Mechanism> out;
    const Index first_half = (layers + 1) / 2;
    for (Index l = 0; l < layers; ++l) {
        switch (layout) {
            case Layout::SA: out.push_back(Mechanism::SA); break;
            case Layout::SC: out.push_back(Mechanism::SC); break;
            case Layout::SW: out.push_back(Mechanism::SW); break;
            case Layout::MIX: out.push_back(l < first_half ? Mechanism::SA : Mechanism::SC); break;
        }
    }
    return out;
}

ConsensusHyper ModelConfig::consensus_hyper() const {
    ConsensusHyper h;
    h.d = d;
    h.heads = heads;
    h.rank = rank;
    h.edge_hidden = edge_hidden;
    h.eta = eta;
    h.rope = rope;
    h.rope_base = rope_base;
    return h;
}

AttentionHyper ModelConfig::attention_hyper() const {
    AttentionHyper h;
    h.d = d;
    h.heads = heads;
    h.window = sw_window;
    h.rope = rope;
    h.rope_base = rope_base;
    return h;
}

void ModelConfig::validate() const {
    if (layers < 1) throw ConfigurationError("model: layers must be >= 1");
    if (seq_len < 2) throw ConfigurationError("model: seq_len must be >= 2");
    if (vocab < 2) throw ConfigurationError("model: vocab must be >= 2");
    if (window < 1) throw ConfigurationError("model: consensus window must be >= 1");
    consensus_hyper().validate();
    attention_hyper().validate();
}

Batch mask_corrupt(const std::vector<Index>& tokens, Index seq_len, double rate, Index mask_token, Rng& rng) {
    if (!(rate > 0.0 && rate < 1.0)) throw ParameterError("mask_corrupt: rate must lie in (0, 1)");
    if (seq_len < 1 || tokens.empty() || static_cast<Index>(tokens.size()) % seq_len != 0)
        throw DimensionError("mask_corrupt: token count is not a multiple of seq_len");
    Batch b;
    b.seq_len = seq_len;
    b.batch = static_cast<Index>(tokens.size()) / seq_len;
    b.tokens = tokens;
    std::vector<char> masked(static_cast<std::size_t>(seq_len));
    for (Index s = 0; s < b.batch; ++s) {
        bool any = false;
        while (!any) {
            for (Index i = 0; i < seq_len; ++i) {
                masked[static_cast<std::size_t>(i)] = rng.uniform() < rate;
                any = any || masked[static_cast<std::size_t>(i)];
            }
        }
        for (Index i = 0; i < seq_len; ++i) {
            if (!masked[static_cast<std::size_t>(i)]) continue;
            const Index flat = s * seq_len + i;
            b.positions.push_back(flat);
            b.targets.push_back(tokens[static_cast<std::size_t>(flat)]);
            b.tokens[static_cast<std::size_t>(flat)] = mask_token;
        }
    }
    return b;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Index d = cfg_.d;
    layers_ = cfg_.mechanisms();
    store_.add("embed", cfg_.vocab + 1, d);
    for (Index l = 0; l < cfg_.layers; ++l) {
        const std::string pre = layer_prefix(l);
        store_.add(pre + "ln1.g", 1, d);
        store_.add(pre + "ln1.b", 1, d);
        if (layers_[static_cast<std::size_t>(l)] == Mechanism::SC)
            add_consensus_params(store_, pre + "mix.", cfg_.consensus_hyper());
        else
            add_attention_params(store_, pre + "mix.", cfg_.attention_hyper());
        store_.add(pre + "ln2.g", 1, d);
        store_.add(pre + "ln2.b", 1, d);
        store_.add(pre + "mlp.w1", 4 * d, d);
        store_.add(pre + "mlp.b1", 1, 4 * d);
        store_.add(pre + "mlp.w2", d, 4 * d);
        store_.add(pre + "mlp.b2", 1, d);
    }
    store_.add("ln_f.g", 1, d);
    store_.add("ln_f.b", 1, d);
    store_.add("head.w", cfg_.vocab, d);
    store_.add("head.b", 1, cfg_.vocab);
}

void Model::initialize(Rng& rng) {
    const Index d = cfg_.d;
    store_.values().setZero();
    for (Index k = 0; k < store_.get("embed").size(); ++k) store_.get("embed").data()[k] = 0.02 * rng.normal();
    for (Index l = 0; l < cfg_.layers; ++l) {
        const std::string pre = layer_prefix(l);
        store_.get(pre + "ln1.g").setOnes();
        store_.get(pre + "ln2.g").setOnes();
        if (layers_[static_cast<std::size_t>(l)] == Mechanism::SC)
            init_consensus_params(store_, pre + "mix.", cfg_.consensus_hyper(), rng);
        else
            init_attention_params(store_, pre + "mix.", cfg_.attention_hyper(), rng);
        fill_uniform(store_.get(pre + "mlp.w1"), 1.0 / std::sqrt(static_cast<double>(d)), rng);
        fill_uniform(store_.get(pre + "mlp.w2"), 1.0 / std::sqrt(static_cast<double>(4 * d)), rng);
    }
    store_.get("ln_f.g").setOnes();
    fill_uniform(store_.get("head.w"), 0.5 / std::sqrt(static_cast<double>(d)), rng);
}

template <typename S>
ad::Var<S> Model::hidden(const Bound<S>& p, const std::vector<Index>& tokens, Index batch) const {
    const Index L = cfg_.seq_len;
    if (batch < 1 || static_cast<Index>(tokens.size()) != batch * L)
        throw DimensionError("model: expected " + std::to_string(batch) + " x " + std::to_string(L) + " tokens");
    for (Index t : tokens)
        if (t < 0 || t > cfg_.vocab) throw ParameterError("model: token id " + std::to_string(t) + " out of range");

    EdgeIndex edges;
    std::vector<double> positions;
    if (cfg_.layout == Layout::SC || cfg_.layout == Layout::MIX) {
        edges = EdgeIndex::from(build_window_path(L, cfg_.window).disjoint_union(batch));
        positions.resize(static_cast<std::size_t>(batch * L));
        for (Index i = 0; i < batch * L; ++i) positions[static_cast<std::size_t>(i)] = static_cast<double>(i % L);
    }
    const ConsensusHyper ch = cfg_.consensus_hyper();
    const AttentionHyper ah = cfg_.attention_hyper();

    ad::Var<S> x = ad::gather_rows(p["embed"], tokens);
    for (Index l = 0; l < cfg_.layers; ++l) {
        const std::string pre = layer_prefix(l);
        const ad::Var<S> a = ad::layer_norm_rows(x, p[pre + "ln1.g"], p[pre + "ln1.b"]);
        ad::Var<S> mixed;
        switch (layers_[static_cast<std::size_t>(l)]) {
            case Mechanism::SA: mixed = self_attention(p, pre + "mix.", ah, a, L); break;
            case Mechanism::SW: mixed = sliding_window_attention(p, pre + "mix.", ah, a, L); break;
            case Mechanism::SC: mixed = self_consensus(p, pre + "mix.", ch, a, edges, positions); break;
        }
        x = ad::add(x, mixed);
        const ad::Var<S> b = ad::layer_norm_rows(x, p[pre + "ln2.g"], p[pre + "ln2.b"]);
        const ad::Var<S> h = ad::gelu(ad::linear(b, p[pre + "mlp.w1"], p[pre + "mlp.b1"]));
        x = ad::add(x, ad::linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"]));
    }
    return x;
}

template <typename S>
ad::Var<S> Model::logits(const Bound<S>& p, const std::vector<Index>& tokens, Index batch) const {
    const ad::Var<S> x = ad::layer_norm_rows(hidden(p, tokens, batch), p["ln_f.g"], p["ln_f.b"]);
    return ad::linear(x, p["head.w"], p["head.b"]);
}

template <typename S>
ad::Var<S> Model::loss(const Bound<S>& p, const Batch& batch) const {
    if (batch.seq_len != cfg_.seq_len) throw DimensionError("model: batch sequence length does not match config");
    if (batch.positions.empty() || batch.positions.size() != batch.targets.size())
        throw ParameterError("model: batch needs at least one masked position with a target");
    for (Index t : batch.targets)
        if (t < 0 || t >= cfg_.vocab) throw ParameterError("model: target id out of range");
    return ad::masked_cross_entropy(logits(p, batch.tokens, batch.batch), batch.positions, batch.targets);
}

template ad::Var<double> Model::hidden(const Bound<double>&, const std::vector<Index>&, Index) const;
template ad::Var<Dual> Model::hidden(const Bound<Dual>&, const std::vector<Index>&, Index) const;
template ad::Var<double> Model::logits(const Bound<double>&, const std::vector<Index>&, Index) const;
template ad::Var<Dual> Model::logits(const Bound<Dual>&, const std::vector<Index>&, Index) const;
template ad::Var<double> Model::loss(const Bound<double>&, const Batch&) const;
template ad::Var<Dual> Model::loss(const Bound<Dual>&, const Batch&) const;

}  // namespace consensus
