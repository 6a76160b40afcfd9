#pragma once

#include <string>
#include <vector>

#include "consensus/params.hpp"

namespace consensus {

struct AttentionHyper {
    Index d = 0;
    Index heads = 1;
    /// Band half-width for sliding-window attention; ignored by full and cross attention.
    Index window = 2;
    bool rope = false;
    double rope_base = 10000.0;

    Index head_dim() const { return d / heads; }
    void validate() const;
};

/// Slots `<prefix>w_q`, `b_q`, `w_k`, `b_k`, `w_v`, `b_v`, `w_o`, `b_o` (d x d weights, 1 x d biases).
void add_attention_params(ParameterStore& store, const std::string& prefix, const AttentionHyper& hyper);
void init_attention_params(ParameterStore& store, const std::string& prefix, const AttentionHyper& hyper, Rng& rng);

/// Additive logit used for positions outside the band.
inline constexpr double kMaskedLogit = -1e30;

// --- differentiable forms --------------------------------------------------------------------
//
// `y` stacks independent sequences of length `segment` (0: one sequence of all rows). RoPE
// positions restart at 0 in each sequence.

template <typename S>
ad::Var<S> self_attention(const Bound<S>& p, const std::string& prefix, const AttentionHyper& hyper, ad::Var<S> y,
                          Index segment = 0);

/// Banded attention over |i - j| <= window within each sequence. Cost O(n · window · d).
template <typename S>
ad::Var<S> sliding_window_attention(const Bound<S>& p, const std::string& prefix, const AttentionHyper& hyper,
                                   ad::Var<S> y, Index segment = 0);

/// Queries from y, keys and values from c.
template <typename S>
ad::Var<S> cross_attention(const Bound<S>& p, const std::string& prefix, const AttentionHyper& hyper, ad::Var<S> y,
                           ad::Var<S> c);

// --- value-level forms -----------------------------------------------------------------------

struct AttentionResult {
    Matrix output;
    /// One dense n x m weight matrix per head.
    std::vector<Matrix> weights;
};

AttentionResult self_attention_forward(const Matrix& y, const ParameterStore& store, const std::string& prefix,
                                       const AttentionHyper& hyper);
AttentionResult sliding_window_attention_forward(const Matrix& y, const ParameterStore& store,
                                                 const std::string& prefix, const AttentionHyper& hyper);
AttentionResult cross_attention_forward(const Matrix& y, const Matrix& c, const ParameterStore& store,
                                        const std::string& prefix, const AttentionHyper& hyper);

}  // namespace consensus
