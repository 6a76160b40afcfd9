#pragma once

#include <string>
#include <vector>

#include "consensus/attention.hpp"
#include "consensus/consensus.hpp"

namespace consensus {

/// Sequence mechanism used by one transformer layer.
enum class Mechanism { SA, SC, SW };
/// Whole-model layout; MIX puts SA in the first ceil(M/2) layers and SC after.
enum class Layout { SA, SC, SW, MIX };

std::string to_string(Mechanism m);
std::string to_string(Layout l);
/// Throws ConfigurationError on unknown names.
Layout parse_layout(const std::string& s);
Mechanism parse_mechanism(const std::string& s);

struct ModelConfig {
    Index layers = 4;
    Index heads = 4;
    Index d = 64;
    Index seq_len = 128;
    Index vocab = 256;
    Layout layout = Layout::SC;
    /// Consensus graph window w (edges |i - j| <= w within a sequence).
    Index window = 2;
    Index rank = 4;
    Index edge_hidden = 64;
    double eta = 0.1;
    Index sw_window = 2;
    bool rope = true;
    double rope_base = 10000.0;

    std::vector<Mechanism> mechanisms() const;
    Index mask_token() const { return vocab; }
    ConsensusHyper consensus_hyper() const;
    AttentionHyper attention_hyper() const;
    void validate() const;
};

/// Masked-token batch: `tokens` holds batch x seq_len ids row-major with masked positions
/// replaced by the mask token; `targets[k]` is the original id at flat position `positions[k]`.
struct Batch {
    Index batch = 0;
    Index seq_len = 0;
    std::vector<Index> tokens;
    std::vector<Index> positions;
    std::vector<Index> targets;
};

/// Masks each position independently with probability `rate`; a sequence that ends up with no
/// masked position is redrawn. Throws ParameterError unless 0 < rate < 1.
Batch mask_corrupt(const std::vector<Index>& tokens, Index seq_len, double rate, Index mask_token, Rng& rng);

/// Pre-LayerNorm transformer over byte tokens.
///
/// Parameter slots: `embed` ((vocab+1) x d, the extra row is the mask token), per layer `l<k>.`
/// {`ln1.g`, `ln1.b`, mechanism under `l<k>.mix.`, `ln2.g`, `ln2.b`, `mlp.w1`, `mlp.b1`, `mlp.w2`,
/// `mlp.b2`}, then `ln_f.g`, `ln_f.b`, `head.w`, `head.b`.
class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const noexcept { return cfg_; }
    const ParameterStore& params() const noexcept { return store_; }
    ParameterStore& params() noexcept { return store_; }
    /// Mechanism actually registered for each layer.
    const std::vector<Mechanism>& layer_mechanisms() const noexcept { return layers_; }

    /// Fresh parameters drawn from rng; identical seeds give identical vectors.
    void initialize(Rng& rng);

    /// Residual stream after the last block, before the final LayerNorm ((batch·L) x d).
    template <typename S>
    ad::Var<S> hidden(const Bound<S>& p, const std::vector<Index>& tokens, Index batch) const;

    /// Output logits ((batch·L) x vocab).
    template <typename S>
    ad::Var<S> logits(const Bound<S>& p, const std::vector<Index>& tokens, Index batch) const;

    /// Mean negative log-likelihood over the masked positions.
    template <typename S>
    ad::Var<S> loss(const Bound<S>& p, const Batch& batch) const;

    /// Loss callable for the derivative drivers.
    auto loss_fn(const Batch& batch) const {
        return [this, &batch](auto&, const auto& p) { return loss(p, batch); };
    }

private:
    ModelConfig cfg_;
    ParameterStore store_;
    std::vector<Mechanism> layers_;
};

}  // namespace consensus
