#include "consensus/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iterator>
#include <ostream>
#include <thread>

#include "consensus/csv.hpp"
#include "consensus/derivatives.hpp"

namespace consensus {

Vector clip_grad_norm(const Vector& g, double max_norm) {
    if (!(max_norm > 0.0)) throw ParameterError("clip_grad_norm: max_norm must be positive");
    const double n = g.norm();
    if (n <= max_norm) return g;
    return g * (max_norm / n);
}

Vector adamw_update(const Vector& theta, const Vector& g, AdamWState& s, const AdamWConfig& c) {
    if (g.size() != theta.size() || s.m.size() != theta.size() || s.v.size() != theta.size())
        throw DimensionError("adamw: parameter, gradient and moment lengths differ");
    if (!g.allFinite()) return Vector();
    s.m = c.beta1 * s.m + (1.0 - c.beta1) * g;
    s.v = c.beta2 * s.v + (1.0 - c.beta2) * g.cwiseProduct(g);
    s.step += 1;
    const double t = static_cast<double>(s.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    const Vector mhat = s.m / bc1;
    const Vector vhat = s.v / bc2;
    return -c.lr * (mhat.array() / (vhat.array().sqrt() + c.eps)).matrix() - c.lr * c.weight_decay * theta;
}

bool adamw_step(Vector& theta, const Vector& g, AdamWState& state, const AdamWConfig& cfg) {
    const Vector u = adamw_update(theta, g, state, cfg);
    if (u.size() == 0) return false;
    theta += u;
    return true;
}

Corpus Corpus::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw IoError("corpus '" + path + "' is empty");
    return Corpus(std::move(bytes));
}

std::vector<Index> Corpus::sample(Index batch, Index seq_len, Rng& rng) const {
    if (static_cast<Index>(bytes_.size()) < seq_len)
        throw ConfigurationError("corpus holds " + std::to_string(bytes_.size()) + " bytes, fewer than seq_len = " +
                                 std::to_string(seq_len));
    const auto starts = static_cast<std::uint64_t>(static_cast<Index>(bytes_.size()) - seq_len + 1);
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(batch * seq_len));
    for (Index b = 0; b < batch; ++b) {
        const auto off = static_cast<std::size_t>(rng.below(starts));
        for (Index i = 0; i < seq_len; ++i) out.push_back(bytes_[off + static_cast<std::size_t>(i)]);
    }
    return out;
}

bool RunRecord::diverged() const {
    for (double l : loss)
        if (!std::isfinite(l)) return true;
    return !std::isfinite(terminal_loss) || terminal_loss > initial_loss;
}

RunRecord train_from(const Model& model, const Vector& theta0, const Corpus& corpus, const TrainConfig& cfg) {
    if (cfg.steps < 1 || cfg.batch_size < 1) throw ConfigurationError("train: steps and batch_size must be >= 1");
    if (!(cfg.lr >= 0.0)) throw ConfigurationError("train: learning rate must be >= 0");
    const ModelConfig& mc = model.config();
    if (mc.vocab < 256) throw ConfigurationError("train: byte corpus needs vocab >= 256");

    const Rng root(cfg.seed);
    Rng data = root.split("data");
    Rng masking = root.split("mask");
    AdamWConfig opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    AdamWState state = AdamWState::zeros(theta0.size());
    Vector theta = theta0;

    RunRecord rec;
    rec.mechanism = to_string(mc.layout);
    rec.lr = cfg.lr;
    rec.seed = cfg.seed;
    for (Index step = 0; step < cfg.steps; ++step) {
        const Batch batch = mask_corrupt(corpus.sample(cfg.batch_size, mc.seq_len, data), mc.seq_len, cfg.mask_rate,
                                         mc.mask_token(), masking);
        const GradResult g = grad(model.loss_fn(batch), model.params(), theta);
        rec.loss.push_back(g.loss);
        if (step == 0) rec.initial_loss = g.loss;
        if (!std::isfinite(g.loss)) {
            rec.grad_norm.push_back(std::nan(""));
            if (rec.diverged_at < 0) rec.diverged_at = step;
            break;
        }
        if (rec.diverged_at < 0 && g.loss > 10.0 * rec.initial_loss) rec.diverged_at = step;
        if (!g.finite) {
            rec.nonfinite_steps.push_back(step);
            rec.grad_norm.push_back(std::nan(""));
            continue;
        }
        const Vector clipped = clip_grad_norm(g.gradient, cfg.clip_norm);
        rec.grad_norm.push_back(clipped.norm());
        adamw_step(theta, clipped, state, opt);
    }
    const Index n = static_cast<Index>(rec.loss.size());
    const Index k = std::min<Index>(std::max<Index>(cfg.terminal_window, 1), n);
    double total = 0.0;
    for (Index i = n - k; i < n; ++i) total += rec.loss[static_cast<std::size_t>(i)];
    rec.terminal_loss = total / static_cast<double>(k);
    rec.final_params = std::move(theta);
    return rec;
}

RunRecord train(const ModelConfig& mc, const Corpus& corpus, const TrainConfig& cfg) {
    Model model(mc);
    Rng init = Rng(cfg.seed).split("init");
    model.initialize(init);
    return train_from(model, model.params().values(), corpus, cfg);
}

Index SweepTable::non_diverged(const std::string& mechanism) const {
    Index count = 0;
    for (const auto& r : runs)
        if (r.mechanism == mechanism && !r.diverged()) ++count;
    return count;
}

SweepTable lr_sweep(const ModelConfig& base, const std::vector<Layout>& layouts, const std::vector<double>& lrs,
                    const std::vector<std::uint64_t>& seeds, const Corpus& corpus, const TrainConfig& cfg,
                    unsigned workers) {
    if (lrs.empty() || layouts.empty() || seeds.empty())
        throw ConfigurationError("lr_sweep: layouts, learning rates and seeds must be nonempty");
    SweepTable table;
    std::vector<double> grid;
    for (double lr : lrs) {
        if (std::find(grid.begin(), grid.end(), lr) != grid.end())
            table.duplicates.push_back(lr);
        else
            grid.push_back(lr);
    }
    std::vector<SweepCell> cells;
    for (Layout l : layouts)
        for (double lr : grid)
            for (std::uint64_t s : seeds) cells.push_back({l, lr, s});

    table.runs.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t k = next++; k < cells.size(); k = next++) {
            ModelConfig mc = base;
            mc.layout = cells[k].layout;
            TrainConfig tc = cfg;
            tc.lr = cells[k].lr;
            tc.seed = cells[k].seed;
            table.runs[k] = train(mc, corpus, tc);
        }
    };
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, static_cast<unsigned>(cells.size()));
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return table;
}

void write_sweep_csv(std::ostream& os, const SweepTable& table) {
    CsvWriter csv(os);
    csv.header({"mechanism", "lr", "seed", "initial_loss", "terminal_loss", "diverged", "diverged_at_step"});
    for (const auto& r : table.runs)
        csv.row(r.mechanism, r.lr, r.seed, r.initial_loss, r.terminal_loss, r.diverged(), r.diverged_at);
}

void write_loss_curve_csv(std::ostream& os, const RunRecord& run) {
    CsvWriter csv(os);
    csv.header({"step", "loss", "grad_norm"});
    for (std::size_t k = 0; k < run.loss.size(); ++k) csv.row(k, run.loss[k], run.grad_norm[k]);
}

}  // namespace consensus
