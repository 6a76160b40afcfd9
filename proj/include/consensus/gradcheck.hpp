#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "consensus/tensor.hpp"

namespace consensus {

/// One (case, parameter block) line of a gradient-check run.
struct GradCheckRow {
    std::string mechanism;
    std::string block;
    double max_rel_err = 0.0;
    bool passed = false;
};

struct GradCheckOptions {
    std::uint64_t seed = 0;
    double tolerance = 1e-5;
    /// Central-difference step, relative to max(1, |θ_i|).
    double step = 1e-5;
    /// Negative control: perturbs every analytic gradient before comparison.
    bool inject_bug = false;
};

/// Backprop against central differences for every mechanism (layer level, single and multi-head,
/// self and cross) and for each full-model layout. Blocks group slots by their leading name
/// components, so `l0.mix.h1.alpha.w1` falls into `l0.mix`.
std::vector<GradCheckRow> run_gradcheck_suite(const GradCheckOptions& options);

/// Columns: mechanism, block, max_rel_err, passed.
void write_gradcheck_csv(std::ostream& os, const std::vector<GradCheckRow>& rows);

}  // namespace consensus
