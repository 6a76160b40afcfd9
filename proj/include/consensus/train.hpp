#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "consensus/model.hpp"

namespace consensus {

// --- optimizer -------------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

struct AdamWState {
    Vector m;
    Vector v;
    /// Completed steps; the next update uses bias correction with t = step + 1.
    std::int64_t step = 0;

    static AdamWState zeros(Index n) { return {Vector::Zero(n), Vector::Zero(n), 0}; }
};

/// Rescales g to norm min(‖g‖, max_norm). Throws ParameterError unless max_norm > 0.
Vector clip_grad_norm(const Vector& g, double max_norm);

/// Advances the moments with g and returns the update u with θ' = θ + u (decoupled decay
/// included). Returns an empty vector and leaves the state untouched when g is non-finite.
Vector adamw_update(const Vector& theta, const Vector& g, AdamWState& state, const AdamWConfig& cfg);

/// θ ← θ + u. Returns false (step skipped) for non-finite g.
bool adamw_step(Vector& theta, const Vector& g, AdamWState& state, const AdamWConfig& cfg);

// --- corpus ----------------------------------------------------------------------------------

/// Byte-level text; every byte is a token in [0, 256).
class Corpus {
public:
    explicit Corpus(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}
    /// Throws IoError when the file cannot be read or is empty.
    static Corpus from_file(const std::string& path);

    std::size_t size() const noexcept { return bytes_.size(); }
    const std::vector<unsigned char>& bytes() const noexcept { return bytes_; }

    /// `batch` windows of length seq_len at uniform random offsets, concatenated.
    std::vector<Index> sample(Index batch, Index seq_len, Rng& rng) const;

private:
    std::vector<unsigned char> bytes_;
};

// --- training --------------------------------------------------------------------------------

struct TrainConfig {
    Index steps = 500;
    Index batch_size = 4;
    double lr = 1e-3;
    double mask_rate = 0.3;
    double clip_norm = 1.0;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
    /// Terminal loss is the mean over this many final steps.
    Index terminal_window = 25;
};

struct RunRecord {
    std::string mechanism;
    double lr = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> loss;
    /// Gradient norm after clipping, per step.
    std::vector<double> grad_norm;
    /// Steps whose gradient was non-finite (update skipped).
    std::vector<Index> nonfinite_steps;
    double initial_loss = 0.0;
    double terminal_loss = 0.0;
    /// First step with a non-finite loss or loss > 10 x initial, else -1.
    Index diverged_at = -1;
    Vector final_params;

    /// Sweep-table divergence: any non-finite loss, or terminal loss above the initial loss.
    bool diverged() const;
};

/// Trains a fresh model (initialised from the seed) with AdamW and global-norm clipping.
/// Training stops early at the first non-finite loss.
RunRecord train(const ModelConfig& model, const Corpus& corpus, const TrainConfig& cfg);

/// Continues training an existing parameter vector; used by train() and checkpoint workflows.
RunRecord train_from(const Model& model, const Vector& theta, const Corpus& corpus, const TrainConfig& cfg);

struct SweepCell {
    Layout layout;
    double lr;
    std::uint64_t seed;
};

struct SweepTable {
    std::vector<RunRecord> runs;
    /// Learning rates dropped as duplicates.
    std::vector<double> duplicates;

    Index non_diverged(const std::string& mechanism) const;
};

/// One run per (layout, lr, seed), in that nesting order. Duplicate learning rates are dropped
/// (reported in `duplicates`). Cells run on up to `workers` threads (0: hardware concurrency);
/// results do not depend on the worker count.
SweepTable lr_sweep(const ModelConfig& base, const std::vector<Layout>& layouts, const std::vector<double>& lrs,
                    const std::vector<std::uint64_t>& seeds, const Corpus& corpus, const TrainConfig& cfg,
                    unsigned workers = 0);

/// Columns: mechanism,lr,seed,initial_loss,terminal_loss,diverged,diverged_at_step.
void write_sweep_csv(std::ostream& os, const SweepTable& table);
/// Columns: step,loss,grad_norm.
void write_loss_curve_csv(std::ostream& os, const RunRecord& run);

}  // namespace consensus
