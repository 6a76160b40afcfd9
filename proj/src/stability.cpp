#include "consensus/stability.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "consensus/csv.hpp"

namespace consensus {

std::string to_string(HvpMode m) { return m == HvpMode::exact ? "exact" : "fd"; }

std::string to_string(AlphaClass c) {
    switch (c) {
        case AlphaClass::zero: return "zero";
        case AlphaClass::finite: return "finite";
        case AlphaClass::infinite: return "infinite";
    }
    return "?";
}

HvpMode parse_hvp_mode(const std::string& s) {
    if (s == "exact") return HvpMode::exact;
    if (s == "fd" || s == "finite-difference") return HvpMode::finite_difference;
    throw ConfigurationError("unknown HVP mode '" + s + "' (expected exact or fd)");
}

AlphaMaxRecord classify_alpha_max(double gdotu, double uHu, Index step) {
    AlphaMaxRecord r;
    r.step = step;
    r.gdotu = gdotu;
    r.uHu = uHu;
    if (!std::isfinite(gdotu) || !std::isfinite(uHu)) {
        r.valid = false;
        r.classification = AlphaClass::infinite;
        r.alpha_max = std::nan("");
        return r;
    }
    if (gdotu > 0.0) {
        r.classification = AlphaClass::zero;
        r.alpha_max = 0.0;
    } else if (uHu <= 0.0) {
        r.classification = AlphaClass::infinite;
        r.alpha_max = std::numeric_limits<double>::infinity();
    } else {
        r.classification = AlphaClass::finite;
        r.alpha_max = -2.0 * gdotu / uHu;
    }
    return r;
}

double ProbeReport::median_alpha_max() const {
    std::vector<double> vals;
    for (const auto& r : records)
        if (r.valid && r.classification != AlphaClass::infinite) vals.push_back(r.alpha_max);
    if (vals.empty()) return std::numeric_limits<double>::infinity();
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    return n % 2 == 1 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

double ProbeReport::percent_stable() const {
    if (records.empty()) return 0.0;
    std::size_t stable = 0;
    for (const auto& r : records)
        if (r.valid && r.alpha_max > training_lr) ++stable;
    return 100.0 * static_cast<double>(stable) / static_cast<double>(records.size());
}

bool ProbeReport::all_infinite() const {
    return std::all_of(records.begin(), records.end(),
                       [](const AlphaMaxRecord& r) { return r.classification == AlphaClass::infinite; });
}

ProbeReport probe(const Model& model, const Vector& theta0, const Corpus& corpus, const ProbeConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw ConfigurationError("probe: learning rate must be positive");
    if (cfg.warmup_batches < 1 || cfg.warmup_steps < 0 || cfg.probe_steps < 1 || cfg.batch_size < 1)
        throw ConfigurationError("probe: warmup batches, probe steps and batch size must be positive");
    if (theta0.size() != model.params().size()) throw DimensionError("probe: parameter vector does not fit the model");
    const ModelConfig& mc = model.config();
    const ParameterStore& store = model.params();
    const Rng root(cfg.seed);
    Rng data = root.split("probe-data");
    Rng masking = root.split("probe-mask");
    auto next_batch = [&] {
        return mask_corrupt(corpus.sample(cfg.batch_size, mc.seq_len, data), mc.seq_len, cfg.mask_rate,
                            mc.mask_token(), masking);
    };
    auto clipped_grad = [&](const Batch& b, const Vector& theta) {
        GradResult g = grad(model.loss_fn(b), store, theta);
        if (g.finite) g.gradient = clip_grad_norm(g.gradient, cfg.clip_norm);
        return g;
    };

    AdamWConfig opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    AdamWState state = AdamWState::zeros(theta0.size());
    Vector theta = theta0;

    // Moments from batches without stepping.
    Index counted = 0;
    for (Index k = 0; k < cfg.warmup_batches; ++k) {
        const GradResult g = clipped_grad(next_batch(), theta);
        if (!g.finite) continue;
        state.m += g.gradient;
        state.v += g.gradient.cwiseProduct(g.gradient);
        ++counted;
    }
    if (counted > 0) {
        state.m /= static_cast<double>(counted);
        state.v /= static_cast<double>(counted);
    }
    state.step = cfg.warmup_batches;

    for (Index k = 0; k < cfg.warmup_steps; ++k) {
        const GradResult g = clipped_grad(next_batch(), theta);
        if (g.finite) adamw_step(theta, g.gradient, state, opt);
    }

    ProbeReport report;
    report.training_lr = cfg.lr;
    report.mode = cfg.mode;
    for (Index k = 0; k < cfg.probe_steps; ++k) {
        const Batch b = next_batch();
        const GradResult g = clipped_grad(b, theta);
        if (!g.finite) {
            AlphaMaxRecord r = classify_alpha_max(std::nan(""), std::nan(""), k);
            report.records.push_back(r);
            continue;
        }
        const Vector update = adamw_update(theta, g.gradient, state, opt);
        const Vector u = update / cfg.lr;
        const HvpResult h = hvp(model.loss_fn(b), store, theta, u, cfg.mode, cfg.eps);
        AlphaMaxRecord r = classify_alpha_max(g.gradient.dot(u), u.dot(h.hv), k);
        r.valid = r.valid && h.finite;
        report.records.push_back(r);
        theta += update;
    }
    return report;
}

void write_probe_csv(std::ostream& os, const ProbeReport& report) {
    CsvWriter csv(os);
    csv.header({"step", "gdotu", "uHu", "alpha_max", "classification"});
    for (const auto& r : report.records)
        csv.row(r.step, r.gdotu, r.uHu, r.alpha_max, r.valid ? to_string(r.classification) : std::string("invalid"));
}

std::string probe_summary_json(const ProbeReport& report) {
    nlohmann::ordered_json j;
    const double med = report.median_alpha_max();
    if (std::isinf(med))
        j["median_alpha_max"] = kNoFiniteMarker;
    else
        j["median_alpha_max"] = med;
    j["percent_stable"] = report.percent_stable();
    j["training_lr"] = report.training_lr;
    j["hvp_mode"] = to_string(report.mode);
    return j.dump(2) + "\n";
}

}  // namespace consensus
