// consensus: command-line driver for spectral checks, filtering, gradient checks, training,
// learning-rate sweeps and stability probes.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "consensus/config.hpp"
#include "consensus/csv.hpp"
#include "consensus/filter.hpp"
#include "consensus/gradcheck.hpp"
#include "consensus/graph.hpp"

namespace fs = std::filesystem;
using namespace consensus;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kIo = 2, kNumerical = 3 };

/// Thrown when a command ran but one of its checks failed.
struct CheckFailed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string args_hash(const nlohmann::ordered_json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

std::string provenance(const std::string& hash, std::uint64_t seed) {
    return "config_hash=" + hash + ",seed=" + std::to_string(seed);
}

/// Opens `path` for writing (or returns stdout for "-" / empty).
class Sink {
public:
    explicit Sink(const std::string& path) {
        if (path.empty() || path == "-") return;
        if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
            std::error_code ec;
            fs::create_directories(parent, ec);
        }
        file_.open(path, std::ios::binary);
        if (!file_) throw IoError("cannot write '" + path + "'");
    }
    std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

private:
    std::ofstream file_;
};

fs::path output_dir(const std::string& configured) {
    if (const char* env = std::getenv("CONSENSUS_OUTPUT_DIR"); env && *env) return env;
    return configured.empty() ? fs::path(".") : fs::path(configured);
}

fs::path prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
    return dir;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw IoError("cannot write '" + path.string() + "'");
}

// --- spectral --------------------------------------------------------------------------------

struct SpectralArgs {
    std::string family = "cycle";
    Index n = 0;
    Index w = 0;
    Index n_max = 0;
    std::string out;
    std::uint64_t seed = 0;
};

int cmd_spectral(const SpectralArgs& a) {
    if (a.family != "cycle" && a.family != "path") throw ConfigurationError("--family must be cycle or path");
    std::vector<std::pair<Index, Index>> cells;
    if (a.n_max > 0) {
        for (Index n = 3; n <= a.n_max; ++n)
            for (Index w = 1; 2 * w < n; ++w) cells.emplace_back(n, w);
    } else {
        if (a.n < 2 || a.w < 1 || 2 * a.w >= a.n)
            throw ConfigurationError("need n >= 2 and 1 <= w < n/2 (or --n-max for a sweep)");
        cells.emplace_back(a.n, a.w);
    }
    nlohmann::ordered_json args{{"command", "spectral"}, {"family", a.family}, {"n", a.n}, {"w", a.w},
                                {"n_max", a.n_max}};
    Sink sink(a.out);
    CsvWriter csv(sink.stream());
    csv.comment(provenance(args_hash(args), a.seed));
    csv.header({"n", "w", "lambda1_closed_form", "fiedler_bruteforce", "lower_bound", "upper_bound", "within_bounds"});
    bool ok = true;
    for (const auto& [n, w] : cells) {
        if (a.family == "cycle") {
            const double closed = cycle_power_lambda1(n, w);
            const double brute = fiedler_value(build_cycle_power(n, w));
            const bool match = std::abs(closed - brute) <= 1e-9;
            ok = ok && match;
            csv.row(n, w, closed, brute, "", "", match);
        } else {
            const FiedlerBounds b = path_fiedler_bounds(n, w);
            const double brute = fiedler_value(build_window_path(n, w));
            const bool within = brute >= b.lower - 1e-12 && brute <= b.upper + 1e-12;
            ok = ok && within;
            csv.row(n, w, "", brute, b.lower, b.upper, within);
        }
    }
    if (!ok) throw CheckFailed("spectral: a closed form or bound check failed");
    return kOk;
}

// --- filter ----------------------------------------------------------------------------------

struct FilterArgs {
    std::string family = "cycle";
    Index n = 8;
    Index w = 1;
    double eta_fraction = 0.9;
    Index steps = 200;
    std::string out;
    std::uint64_t seed = 0;
};

int cmd_filter(const FilterArgs& a) {
    if (a.family != "cycle" && a.family != "path") throw ConfigurationError("--family must be cycle or path");
    if (a.steps < 0) throw ConfigurationError("--steps must be non-negative");
    if (!(a.eta_fraction > 0.0)) throw ConfigurationError("--eta-fraction must be positive");
    const Graph g = a.family == "cycle" ? build_cycle_power(a.n, a.w) : build_window_path(a.n, a.w);
    const double eta = a.eta_fraction * non_oscillation_threshold(g);
    Rng rng = Rng(a.seed).split("filter-signal");
    Signal u(a.n, 1);
    for (Index i = 0; i < a.n; ++i) u(i, 0) = rng.normal();
    const FilterReport r = filter_iterate(g, u, eta, a.steps);

    nlohmann::ordered_json args{{"command", "filter"}, {"family", a.family}, {"n", a.n}, {"w", a.w},
                                {"eta_fraction", a.eta_fraction}, {"steps", a.steps}};
    Sink sink(a.out);
    CsvWriter(sink.stream()).comment(provenance(args_hash(args), a.seed) + ",eta=" + format_number(eta));
    write_filter_report_csv(sink.stream(), r);
    for (std::size_t k = 0; k < r.distance_to_mean.size(); ++k)
        if (r.distance_to_mean[k] > r.bound[k] * (1.0 + 1e-12) + 1e-14)
            throw CheckFailed("filter: distance to mean exceeds the contraction bound at step " + std::to_string(k));
    return kOk;
}

// --- gradcheck -------------------------------------------------------------------------------

int cmd_gradcheck(const GradCheckOptions& opt, const std::string& out) {
    const auto rows = run_gradcheck_suite(opt);
    nlohmann::ordered_json args{{"command", "gradcheck"}, {"tolerance", opt.tolerance}, {"step", opt.step},
                                {"inject_bug", opt.inject_bug}};
    Sink sink(out);
    CsvWriter(sink.stream()).comment(provenance(args_hash(args), opt.seed));
    write_gradcheck_csv(sink.stream(), rows);
    std::size_t failed = 0;
    for (const auto& r : rows)
        if (!r.passed) {
            ++failed;
            std::cerr << "gradcheck: " << r.mechanism << " / " << r.block << " max_rel_err=" << format_number(r.max_rel_err)
                      << '\n';
        }
    if (failed) throw CheckFailed("gradcheck: " + std::to_string(failed) + " block(s) above tolerance");
    return kOk;
}

// --- experiment commands ---------------------------------------------------------------------

struct ExperimentArgs {
    std::string config;
    std::string corpus;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> layout;
    std::optional<double> lr;
    std::optional<Index> steps;
    std::string checkpoint;
    std::optional<std::string> hvp;
    std::optional<Index> window;
    std::optional<Index> rank;
    std::optional<Index> edge_hidden;
};

ExperimentConfig resolve(const ExperimentArgs& a) {
    ExperimentConfig c = a.config.empty() ? ExperimentConfig{} : load_experiment_config(a.config);
    if (!a.corpus.empty()) c.corpus = a.corpus;
    if (!a.out_dir.empty()) c.output_dir = a.out_dir;
    if (a.seed) c.seed = *a.seed;
    if (a.layout) c.model.layout = parse_layout(*a.layout);
    if (a.lr) {
        c.train.lr = *a.lr;
        c.probe.lr = *a.lr;
    }
    if (a.steps) c.train.steps = *a.steps;
    if (a.hvp) c.probe.mode = parse_hvp_mode(*a.hvp);
    if (a.window) c.model.window = *a.window;
    if (a.rank) c.model.rank = *a.rank;
    if (a.edge_hidden) c.model.edge_hidden = *a.edge_hidden;
    c.train.seed = c.seed;
    c.probe.seed = c.seed;
    c.model.validate();
    if (c.corpus.empty()) throw ConfigurationError("no corpus given (--corpus or \"corpus\" in the config)");
    return c;
}

int cmd_train(const ExperimentArgs& a) {
    const ExperimentConfig c = resolve(a);
    const Corpus corpus = Corpus::from_file(c.corpus);
    const fs::path dir = prepare_dir(output_dir(c.output_dir));
    const RunRecord run = train(c.model, corpus, c.train);
    const std::string tag = provenance(config_hash(c), c.seed);

    std::ostringstream curve;
    CsvWriter(curve).comment(tag);
    write_loss_curve_csv(curve, run);
    write_file(dir / "loss_curve.csv", curve.str());

    Model model(c.model);
    model.params().set_values(run.final_params);
    save_checkpoint((dir / "model.ckpt").string(), c.model, model.params(), c.train.steps);

    nlohmann::ordered_json summary{{"config_hash", config_hash(c)},
                                   {"seed", c.seed},
                                   {"layout", to_string(c.model.layout)},
                                   {"lr", c.train.lr},
                                   {"initial_loss", run.initial_loss},
                                   {"terminal_loss", run.terminal_loss},
                                   {"diverged", run.diverged()},
                                   {"diverged_at_step", run.diverged_at}};
    write_file(dir / "train_summary.json", summary.dump(2) + "\n");
    std::cout << format_number(run.initial_loss) << " -> " << format_number(run.terminal_loss)
              << (run.diverged() ? " (diverged)" : "") << '\n';
    return kOk;
}

int cmd_sweep(const ExperimentArgs& a) {
    const ExperimentConfig c = resolve(a);
    const Corpus corpus = Corpus::from_file(c.corpus);
    const fs::path dir = prepare_dir(output_dir(c.output_dir));
    const SweepTable table = lr_sweep(c.model, c.sweep.layouts, c.sweep.lrs, c.sweep.seeds, corpus, c.train, c.sweep.workers);
    const std::string tag = provenance(config_hash(c), c.seed);

    std::ostringstream csv;
    CsvWriter(csv).comment(tag);
    write_sweep_csv(csv, table);
    write_file(dir / "sweep.csv", csv.str());
    const fs::path curves = prepare_dir(dir / "curves");
    for (const auto& run : table.runs) {
        std::ostringstream one;
        CsvWriter(one).comment(tag + ",mechanism=" + run.mechanism + ",lr=" + format_number(run.lr) +
                               ",run_seed=" + std::to_string(run.seed));
        write_loss_curve_csv(one, run);
        write_file(curves / (run.mechanism + "_lr" + format_number(run.lr) + "_seed" + std::to_string(run.seed) + ".csv"),
                   one.str());
    }
    for (double lr : table.duplicates) std::cerr << "sweep: dropped duplicate lr " << format_number(lr) << '\n';
    for (const auto layout : c.sweep.layouts)
        std::cout << to_string(layout) << " non-diverged: " << table.non_diverged(to_string(layout)) << '\n';
    return kOk;
}

int cmd_probe(const ExperimentArgs& a) {
    const ExperimentConfig c = resolve(a);
    const Corpus corpus = Corpus::from_file(c.corpus);
    const fs::path dir = prepare_dir(output_dir(c.output_dir));
    Model model(c.model);
    Vector theta;
    if (a.checkpoint.empty()) {
        Rng rng = Rng(c.seed).split("init");
        model.initialize(rng);
        theta = model.params().values();
    } else {
        theta = load_checkpoint_for(a.checkpoint, model);
    }
    const ProbeReport report = probe(model, theta, corpus, c.probe);
    const std::string hash = config_hash(c);

    std::ostringstream csv;
    CsvWriter(csv).comment(provenance(hash, c.seed));
    write_probe_csv(csv, report);
    write_file(dir / "probe.csv", csv.str());

    nlohmann::ordered_json summary = nlohmann::ordered_json::parse(probe_summary_json(report));
    summary["config_hash"] = hash;
    summary["seed"] = c.seed;
    write_file(dir / "probe_summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << '\n';
    for (const auto& r : report.records)
        if (!r.valid) throw CheckFailed("probe: non-finite gradient or curvature at probe step " + std::to_string(r.step));
    return kOk;
}

void add_experiment_options(CLI::App* cmd, ExperimentArgs& a, bool with_run_knobs) {
    cmd->add_option("--config", a.config, "JSON experiment config");
    cmd->add_option("--corpus", a.corpus, "byte corpus file");
    cmd->add_option("--out-dir", a.out_dir, "output directory (CONSENSUS_OUTPUT_DIR overrides)");
    cmd->add_option("--seed", a.seed, "master seed");
    cmd->add_option("--layout", a.layout, "SA, SC, SW or MIX");
    cmd->add_option("--window", a.window, "consensus window w");
    cmd->add_option("--rank", a.rank, "low-rank factor rank r");
    cmd->add_option("--edge-hidden", a.edge_hidden, "edge MLP hidden width xi");
    if (with_run_knobs) {
        cmd->add_option("--lr", a.lr, "learning rate");
        cmd->add_option("--steps", a.steps, "training steps")->check(CLI::NonNegativeNumber);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-consensus transformer toolkit"};
    app.require_subcommand(1);

    SpectralArgs spectral;
    auto* sp = app.add_subcommand("spectral", "Fiedler values against closed forms and bounds");
    sp->add_option("--family", spectral.family, "cycle or path");
    sp->add_option("--n", spectral.n, "number of nodes");
    sp->add_option("--w", spectral.w, "window")->check(CLI::PositiveNumber);
    sp->add_option("--n-max", spectral.n_max, "sweep every n <= n-max and w < n/2");
    sp->add_option("--out", spectral.out, "CSV path (default stdout)");
    sp->add_option("--seed", spectral.seed, "seed recorded in the output");

    FilterArgs filter;
    auto* fi = app.add_subcommand("filter", "Iterate the low-pass filter on a random signal");
    fi->add_option("--family", filter.family, "cycle or path");
    fi->add_option("--n", filter.n, "number of nodes");
    fi->add_option("--w", filter.w, "window")->check(CLI::PositiveNumber);
    fi->add_option("--eta-fraction", filter.eta_fraction, "step size as a fraction of 1/(2 lambda_max)");
    fi->add_option("--steps", filter.steps, "iterations");
    fi->add_option("--out", filter.out, "CSV path (default stdout)");
    fi->add_option("--seed", filter.seed, "signal seed");

    GradCheckOptions gc;
    std::string gc_out;
    auto* gr = app.add_subcommand("gradcheck", "Backprop against central differences for every mechanism");
    gr->add_option("--seed", gc.seed, "parameter seed");
    gr->add_option("--tolerance", gc.tolerance, "maximum relative error");
    gr->add_flag("--inject-bug", gc.inject_bug, "perturb analytic gradients (negative control)");
    gr->add_option("--out", gc_out, "CSV path (default stdout)");

    ExperimentArgs tr_args, sw_args, pr_args;
    auto* tr = app.add_subcommand("train", "Train one model; writes loss_curve.csv and model.ckpt");
    add_experiment_options(tr, tr_args, true);
    auto* sw = app.add_subcommand("sweep", "Learning-rate sweep; writes sweep.csv and per-run curves");
    add_experiment_options(sw, sw_args, true);
    auto* pr = app.add_subcommand("probe", "Directional stability probe; writes probe.csv and probe_summary.json");
    add_experiment_options(pr, pr_args, false);
    pr->add_option("--checkpoint", pr_args.checkpoint, "checkpoint to probe (default: fresh init)");
    pr->add_option("--lr", pr_args.lr, "training learning rate used for the probe steps");
    pr->add_option("--hvp", pr_args.hvp, "exact or fd");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*sp) return cmd_spectral(spectral);
        if (*fi) return cmd_filter(filter);
        if (*gr) return cmd_gradcheck(gc, gc_out);
        if (*tr) return cmd_train(tr_args);
        if (*sw) return cmd_sweep(sw_args);
        if (*pr) return cmd_probe(pr_args);
    } catch (const CheckFailed& e) {
        std::cerr << e.what() << '\n';
        return kNumerical;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const ConfigurationError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kUsage;
    } catch (const ParameterError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const CompatibilityError& e) {
        std::cerr << "compatibility error: " << e.what() << '\n';
        return kUsage;
    } catch (const Error& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumerical;
    }
    return kUsage;
}
