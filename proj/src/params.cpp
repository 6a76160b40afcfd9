#include "consensus/params.hpp"

namespace consensus {

Index ParameterStore::add(const std::string& name, Index rows, Index cols) {
    if (rows < 0 || cols < 0) throw DimensionError("slot '" + name + "' has negative shape");
    if (index_.count(name)) throw ConfigurationError("duplicate parameter slot '" + name + "'");
    const Index offset = values_.size();
    slots_.push_back(Slot{name, rows, cols, offset});
    index_.emplace(name, static_cast<Index>(slots_.size() - 1));
    Vector grown = Vector::Zero(offset + rows * cols);
    grown.head(offset) = values_;
    values_ = std::move(grown);
    return static_cast<Index>(slots_.size() - 1);
}

bool ParameterStore::contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

Index ParameterStore::index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigurationError("unknown parameter slot '" + std::string(name) + "'");
    return it->second;
}

const ParameterStore::Slot& ParameterStore::slot(std::string_view name) const {
    return slots_[static_cast<std::size_t>(index_of(name))];
}

Eigen::Map<Matrix> ParameterStore::get(std::string_view name) {
    const Slot& s = slot(name);
    return Eigen::Map<Matrix>(values_.data() + s.offset, s.rows, s.cols);
}

Eigen::Map<const Matrix> ParameterStore::get(std::string_view name) const {
    const Slot& s = slot(name);
    return Eigen::Map<const Matrix>(values_.data() + s.offset, s.rows, s.cols);
}

void ParameterStore::set_values(const Vector& theta) {
    if (theta.size() != values_.size())
        throw DimensionError("parameter vector has length " + std::to_string(theta.size()) + ", store expects " +
                             std::to_string(values_.size()));
    values_ = theta;
}

bool same_layout(const ParameterStore& a, const ParameterStore& b) {
    if (a.slots_.size() != b.slots_.size()) return false;
    for (std::size_t k = 0; k < a.slots_.size(); ++k) {
        const auto& x = a.slots_[k];
        const auto& y = b.slots_[k];
        if (x.name != y.name || x.rows != y.rows || x.cols != y.cols) return false;
    }
    return true;
}

}  // namespace consensus
