#include "consensus/attention.hpp"

#include <cmath>
#include <cstdlib>

#include "consensus/consensus.hpp"

namespace consensus {

namespace {

Index segment_length(Index segment, Index n) {
    if (segment == 0) return n;
    if (segment < 0 || n % segment != 0)
        throw DimensionError("attention: " + std::to_string(n) + " rows do not split into sequences of length " +
                             std::to_string(segment));
    return segment;
}

std::vector<double> segment_positions(Index n, Index segment) {
    std::vector<double> pos(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) pos[static_cast<std::size_t>(i)] = static_cast<double>(i % segment);
    return pos;
}

void require_width(Index cols, const AttentionHyper& h, const char* what) {
    if (cols != h.d)
        throw DimensionError(std::string(what) + ": embedding width " + std::to_string(cols) + " does not match d = " +
                             std::to_string(h.d));
}

template <typename S>
ad::Var<S> head_slice(ad::Var<S> x, const AttentionHyper& h, Index head) {
    return h.heads == 1 ? x : ad::slice_cols(x, head * h.head_dim(), h.head_dim());
}

template <typename S>
ad::Var<S> rows_of(ad::Var<S> x, Index start, Index count) {
    return start == 0 && count == x.rows() ? x : ad::slice_rows(x, start, count);
}

// value-level helpers

Matrix project(const Matrix& x, const ParameterStore& store, const std::string& w, const std::string& b) {
    Matrix out = x * store.get(w).transpose();
    out.rowwise() += store.get(b).row(0);
    return out;
}

Matrix rope_heads(const Matrix& x, const AttentionHyper& h) {
    if (!h.rope) return x;
    Matrix out(x.rows(), x.cols());
    for (Index head = 0; head < h.heads; ++head)
        out.middleCols(head * h.head_dim(), h.head_dim()) =
            rope_rotate(x.middleCols(head * h.head_dim(), h.head_dim()), h.rope_base);
    return out;
}

/// Dense attention from projected queries/keys/values; `allowed(i, j)` selects visible keys.
template <typename Allowed>
AttentionResult dense_attention(const Matrix& q, const Matrix& k, const Matrix& v, const ParameterStore& store,
                                const std::string& prefix, const AttentionHyper& h, Allowed allowed) {
    const Index dh = h.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    AttentionResult r;
    Matrix heads_out(q.rows(), h.d);
    for (Index head = 0; head < h.heads; ++head) {
        Matrix s = q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() * scale;
        for (Index i = 0; i < s.rows(); ++i) {
            for (Index j = 0; j < s.cols(); ++j)
                if (!allowed(i, j)) s(i, j) = kMaskedLogit;
            const double m = s.row(i).maxCoeff();
            for (Index j = 0; j < s.cols(); ++j) s(i, j) = std::exp(s(i, j) - m);
            s.row(i) /= s.row(i).sum();
        }
        heads_out.middleCols(head * dh, dh) = s * v.middleCols(head * dh, dh);
        r.weights.push_back(std::move(s));
    }
    r.output = project(heads_out, store, prefix + "w_o", prefix + "b_o");
    return r;
}

const char* const kSlots[4] = {"q", "k", "v", "o"};

}  // namespace

void AttentionHyper::validate() const {
    if (d < 1) throw ConfigurationError("attention: d must be positive");
    if (heads < 1) throw ConfigurationError("attention: head count must be positive");
    if (d % heads != 0)
        throw ConfigurationError("attention: d = " + std::to_string(d) + " is not divisible by H = " +
                                 std::to_string(heads));
    if (window < 0) throw ConfigurationError("attention: window must be >= 0");
    if (rope && head_dim() % 2 != 0) throw ConfigurationError("attention: RoPE requires an even head dimension");
    if (rope && !(rope_base > 0.0)) throw ConfigurationError("attention: RoPE base must be positive");
}

void add_attention_params(ParameterStore& store, const std::string& prefix, const AttentionHyper& h) {
    h.validate();
    for (const char* s : kSlots) {
        store.add(prefix + "w_" + s, h.d, h.d);
        store.add(prefix + "b_" + s, 1, h.d);
    }
}

void init_attention_params(ParameterStore& store, const std::string& prefix, const AttentionHyper& h, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(h.d));
    for (const char* s : kSlots) {
        auto w = store.get(prefix + "w_" + s);
        for (Index k = 0; k < w.size(); ++k) w.data()[k] = rng.uniform(-bound, bound);
        store.get(prefix + "b_" + s).setZero();
    }
}

template <typename S>
ad::Var<S> self_attention(const Bound<S>& p, const std::string& prefix, const AttentionHyper& h, ad::Var<S> y,
                          Index segment) {
    h.validate();
    require_width(y.cols(), h, "self_attention");
    const Index n = y.rows();
    const Index seg = segment_length(segment, n);
    ad::Var<S> q = ad::linear(y, p[prefix + "w_q"], p[prefix + "b_q"]);
    ad::Var<S> k = ad::linear(y, p[prefix + "w_k"], p[prefix + "b_k"]);
    const ad::Var<S> v = ad::linear(y, p[prefix + "w_v"], p[prefix + "b_v"]);
    if (h.rope) {
        const auto pos = segment_positions(n, seg);
        q = ad::rope(q, pos, h.rope_base, h.head_dim());
        k = ad::rope(k, pos, h.rope_base, h.head_dim());
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(h.head_dim()));
    std::vector<ad::Var<S>> blocks;
    for (Index s0 = 0; s0 < n; s0 += seg) {
        const ad::Var<S> qs = rows_of(q, s0, seg), ks = rows_of(k, s0, seg), vs = rows_of(v, s0, seg);
        std::vector<ad::Var<S>> heads;
        for (Index head = 0; head < h.heads; ++head) {
            const ad::Var<S> logits = ad::scale(ad::matmul_nt(head_slice(qs, h, head), head_slice(ks, h, head)), scale);
            heads.push_back(ad::matmul(ad::softmax_rows(logits), head_slice(vs, h, head)));
        }
        blocks.push_back(heads.size() == 1 ? heads.front() : ad::concat_cols(heads));
    }
    const ad::Var<S> out = blocks.size() == 1 ? blocks.front() : ad::concat_rows(blocks);
    return ad::linear(out, p[prefix + "w_o"], p[prefix + "b_o"]);
}

template <typename S>
ad::Var<S> sliding_window_attention(const Bound<S>& p, const std::string& prefix, const AttentionHyper& h,
                                   ad::Var<S> y, Index segment) {
    h.validate();
    require_width(y.cols(), h, "sliding_window_attention");
    const Index n = y.rows();
    const Index seg = segment_length(segment, n);
    ad::Var<S> q = ad::linear(y, p[prefix + "w_q"], p[prefix + "b_q"]);
    ad::Var<S> k = ad::linear(y, p[prefix + "w_k"], p[prefix + "b_k"]);
    const ad::Var<S> v = ad::linear(y, p[prefix + "w_v"], p[prefix + "b_v"]);
    if (h.rope) {
        const auto pos = segment_positions(n, seg);
        q = ad::rope(q, pos, h.rope_base, h.head_dim());
        k = ad::rope(k, pos, h.rope_base, h.head_dim());
    }
    const Index width = 2 * h.window + 1;
    // Key index per (row, offset); out-of-sequence offsets point at the row itself and are masked.
    std::vector<std::vector<Index>> idx(static_cast<std::size_t>(width), std::vector<Index>(static_cast<std::size_t>(n)));
    Matrix mask = Matrix::Zero(n, width);
    for (Index o = 0; o < width; ++o) {
        for (Index i = 0; i < n; ++i) {
            const Index j = i + o - h.window;
            const bool inside = j >= 0 && j < n && j / seg == i / seg;
            idx[static_cast<std::size_t>(o)][static_cast<std::size_t>(i)] = inside ? j : i;
            if (!inside) mask(i, o) = kMaskedLogit;
        }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(h.head_dim()));
    std::vector<ad::Var<S>> heads;
    for (Index head = 0; head < h.heads; ++head) {
        const ad::Var<S> qh = head_slice(q, h, head), kh = head_slice(k, h, head), vh = head_slice(v, h, head);
        std::vector<ad::Var<S>> logits;
        for (Index o = 0; o < width; ++o)
            logits.push_back(ad::rowdot(qh, ad::gather_rows(kh, idx[static_cast<std::size_t>(o)])));
        const ad::Var<S> all = logits.size() == 1 ? logits.front() : ad::concat_cols(logits);
        const ad::Var<S> att = ad::softmax_rows(ad::add_mask(ad::scale(all, scale), mask));
        ad::Var<S> acc = ad::mul_colvec(ad::gather_rows(vh, idx[0]), ad::slice_cols(att, 0, 1));
        for (Index o = 1; o < width; ++o)
            acc = ad::add(acc, ad::mul_colvec(ad::gather_rows(vh, idx[static_cast<std::size_t>(o)]),
                                              ad::slice_cols(att, o, 1)));
        heads.push_back(acc);
    }
    const ad::Var<S> out = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
    return ad::linear(out, p[prefix + "w_o"], p[prefix + "b_o"]);
}

template <typename S>
ad::Var<S> cross_attention(const Bound<S>& p, const std::string& prefix, const AttentionHyper& h, ad::Var<S> y,
                           ad::Var<S> c) {
    h.validate();
    require_width(y.cols(), h, "cross_attention source");
    require_width(c.cols(), h, "cross_attention context");
    if (c.rows() < 1) throw DimensionError("cross_attention: empty context");
    ad::Var<S> q = ad::linear(y, p[prefix + "w_q"], p[prefix + "b_q"]);
    ad::Var<S> k = ad::linear(c, p[prefix + "w_k"], p[prefix + "b_k"]);
    const ad::Var<S> v = ad::linear(c, p[prefix + "w_v"], p[prefix + "b_v"]);
    if (h.rope) {
        q = ad::rope(q, segment_positions(y.rows(), y.rows()), h.rope_base, h.head_dim());
        k = ad::rope(k, segment_positions(c.rows(), c.rows()), h.rope_base, h.head_dim());
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(h.head_dim()));
    std::vector<ad::Var<S>> heads;
    for (Index head = 0; head < h.heads; ++head) {
        const ad::Var<S> logits = ad::scale(ad::matmul_nt(head_slice(q, h, head), head_slice(k, h, head)), scale);
        heads.push_back(ad::matmul(ad::softmax_rows(logits), head_slice(v, h, head)));
    }
    const ad::Var<S> out = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
    return ad::linear(out, p[prefix + "w_o"], p[prefix + "b_o"]);
}

template ad::Var<double> self_attention(const Bound<double>&, const std::string&, const AttentionHyper&,
                                        ad::Var<double>, Index);
template ad::Var<Dual> self_attention(const Bound<Dual>&, const std::string&, const AttentionHyper&, ad::Var<Dual>,
                                      Index);
template ad::Var<double> sliding_window_attention(const Bound<double>&, const std::string&, const AttentionHyper&,
                                                  ad::Var<double>, Index);
template ad::Var<Dual> sliding_window_attention(const Bound<Dual>&, const std::string&, const AttentionHyper&,
                                                ad::Var<Dual>, Index);
template ad::Var<double> cross_attention(const Bound<double>&, const std::string&, const AttentionHyper&,
                                         ad::Var<double>, ad::Var<double>);
template ad::Var<Dual> cross_attention(const Bound<Dual>&, const std::string&, const AttentionHyper&, ad::Var<Dual>,
                                       ad::Var<Dual>);

AttentionResult self_attention_forward(const Matrix& y, const ParameterStore& store, const std::string& prefix,
                                       const AttentionHyper& h) {
    h.validate();
    require_width(y.cols(), h, "self_attention_forward");
    const Matrix q = rope_heads(project(y, store, prefix + "w_q", prefix + "b_q"), h);
    const Matrix k = rope_heads(project(y, store, prefix + "w_k", prefix + "b_k"), h);
    const Matrix v = project(y, store, prefix + "w_v", prefix + "b_v");
    return dense_attention(q, k, v, store, prefix, h, [](Index, Index) { return true; });
}

AttentionResult sliding_window_attention_forward(const Matrix& y, const ParameterStore& store,
                                                 const std::string& prefix, const AttentionHyper& h) {
    h.validate();
    require_width(y.cols(), h, "sliding_window_attention_forward");
    const Matrix q = rope_heads(project(y, store, prefix + "w_q", prefix + "b_q"), h);
    const Matrix k = rope_heads(project(y, store, prefix + "w_k", prefix + "b_k"), h);
    const Matrix v = project(y, store, prefix + "w_v", prefix + "b_v");
    const Index w = h.window;
    return dense_attention(q, k, v, store, prefix, h, [w](Index i, Index j) { return std::abs(i - j) <= w; });
}

AttentionResult cross_attention_forward(const Matrix& y, const Matrix& c, const ParameterStore& store,
                                        const std::string& prefix, const AttentionHyper& h) {
    h.validate();
    require_width(y.cols(), h, "cross_attention_forward source");
    require_width(c.cols(), h, "cross_attention_forward context");
    if (c.rows() < 1) throw DimensionError("cross_attention_forward: empty context");
    const Matrix q = rope_heads(project(y, store, prefix + "w_q", prefix + "b_q"), h);
    const Matrix k = rope_heads(project(c, store, prefix + "w_k", prefix + "b_k"), h);
    const Matrix v = project(c, store, prefix + "w_v", prefix + "b_v");
    return dense_attention(q, k, v, store, prefix, h, [](Index, Index) { return true; });
}

}  // namespace consensus
