#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "consensus/tape.hpp"
#include "consensus/tensor.hpp"

namespace consensus {

/// Named matrix slots laid out back to back in one flat vector.
///
/// Slot order is insertion order, so two stores built by the same code agree on every offset.
class ParameterStore {
public:
    struct Slot {
        std::string name;
        Index rows = 0;
        Index cols = 0;
        Index offset = 0;
        Index size() const noexcept { return rows * cols; }
    };

    /// Appends a zero-initialised slot and returns its index.
    Index add(const std::string& name, Index rows, Index cols);

    bool contains(std::string_view name) const;
    Index index_of(std::string_view name) const;
    const Slot& slot(std::string_view name) const;
    const std::vector<Slot>& slots() const noexcept { return slots_; }

    Eigen::Map<Matrix> get(std::string_view name);
    Eigen::Map<const Matrix> get(std::string_view name) const;

    Vector& values() noexcept { return values_; }
    const Vector& values() const noexcept { return values_; }
    Index size() const noexcept { return values_.size(); }

    /// Replaces the flat vector; its length must equal size().
    void set_values(const Vector& theta);

    friend bool same_layout(const ParameterStore& a, const ParameterStore& b);

private:
    std::vector<Slot> slots_;
    std::unordered_map<std::string, Index> index_;
    Vector values_;
};

/// A flat parameter vector placed on a tape as one leaf per slot.
template <typename S>
class Bound {
public:
    Bound(ad::Tape<S>& tape, const ParameterStore& store, const VectorT<S>& theta, bool needs_grad = true)
        : tape_(&tape), store_(&store) {
        if (theta.size() != store.size())
            throw DimensionError("parameter vector has length " + std::to_string(theta.size()) + ", store expects " +
                                 std::to_string(store.size()));
        vars_.reserve(store.slots().size());
        for (const auto& s : store.slots()) {
            MatrixT<S> m = Eigen::Map<const MatrixT<S>>(theta.data() + s.offset, s.rows, s.cols);
            vars_.push_back(tape.leaf(std::move(m), needs_grad));
        }
    }

    ad::Var<S> operator[](std::string_view name) const { return vars_[static_cast<std::size_t>(store_->index_of(name))]; }
    ad::Tape<S>& tape() const { return *tape_; }
    const ParameterStore& store() const { return *store_; }

    /// Flat gradient in store order, read after tape().backward().
    VectorT<S> gradient() const {
        VectorT<S> g(store_->size());
        for (std::size_t k = 0; k < vars_.size(); ++k) {
            const auto& s = store_->slots()[k];
            const MatrixT<S> gk = tape_->grad(vars_[k]);
            Eigen::Map<MatrixT<S>>(g.data() + s.offset, s.rows, s.cols) = gk;
        }
        return g;
    }

private:
    ad::Tape<S>* tape_;
    const ParameterStore* store_;
    std::vector<ad::Var<S>> vars_;
};

}  // namespace consensus
