#include "consensus/config.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

namespace consensus {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

/// Reads the keys of one JSON object and rejects any it was not asked about.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigurationError("config: '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        const json& v = j_.at(key);
        const std::string where = name_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigurationError("config: " + where + " must be a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigurationError("config: " + where + " must be an integer");
            if constexpr (std::is_unsigned_v<T>)
                if (v.is_number_integer() && !v.is_number_unsigned())
                    throw ConfigurationError("config: " + where + " must be non-negative");
            out = v.get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigurationError("config: " + where + " must be a number");
            out = v.get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigurationError("config: " + where + " must be a string");
            out = v.get<std::string>();
        } else {
            if (!v.is_array()) throw ConfigurationError("config: " + where + " must be an array");
            out.clear();
            for (const auto& e : v) {
                typename T::value_type x{};
                const json boxed{{"v", e}};
                Section wrap(boxed, where);
                wrap.get("v", x);
                out.push_back(x);
            }
        }
    }

    const json* sub(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key())) throw ConfigurationError("config: unknown key '" + name_ + "." + item.key() + "'");
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_u64_le(std::ostream& os, std::uint64_t x) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(const unsigned char* b) {
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return x;
}

constexpr char kMagic[8] = {'C', 'N', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr int kSchema = 1;

}  // namespace

ordered_json to_json(const ModelConfig& m) {
    ordered_json j;
    j["layers"] = m.layers;
    j["heads"] = m.heads;
    j["d"] = m.d;
    j["seq_len"] = m.seq_len;
    j["vocab"] = m.vocab;
    j["layout"] = to_string(m.layout);
    j["window"] = m.window;
    j["rank"] = m.rank;
    j["edge_hidden"] = m.edge_hidden;
    j["eta"] = m.eta;
    j["sw_window"] = m.sw_window;
    j["rope"] = m.rope;
    j["rope_base"] = m.rope_base;
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig m;
    Section s(j, "model");
    s.get("layers", m.layers);
    s.get("heads", m.heads);
    s.get("d", m.d);
    s.get("seq_len", m.seq_len);
    s.get("vocab", m.vocab);
    std::string layout = to_string(m.layout);
    s.get("layout", layout);
    m.layout = parse_layout(layout);
    s.get("window", m.window);
    s.get("rank", m.rank);
    s.get("edge_hidden", m.edge_hidden);
    s.get("eta", m.eta);
    s.get("sw_window", m.sw_window);
    s.get("rope", m.rope);
    s.get("rope_base", m.rope_base);
    s.finish();
    m.validate();
    return m;
}

ordered_json to_json(const ExperimentConfig& c) {
    ordered_json j;
    j["model"] = to_json(c.model);
    j["train"] = {{"steps", c.train.steps},
                  {"batch_size", c.train.batch_size},
                  {"lr", c.train.lr},
                  {"mask_rate", c.train.mask_rate},
                  {"clip_norm", c.train.clip_norm},
                  {"weight_decay", c.train.weight_decay},
                  {"terminal_window", c.train.terminal_window}};
    std::vector<std::string> layouts;
    for (Layout l : c.sweep.layouts) layouts.push_back(to_string(l));
    j["sweep"] = {{"layouts", layouts}, {"lrs", c.sweep.lrs}, {"seeds", c.sweep.seeds}, {"workers", c.sweep.workers}};
    j["probe"] = {{"warmup_batches", c.probe.warmup_batches},
                  {"warmup_steps", c.probe.warmup_steps},
                  {"probe_steps", c.probe.probe_steps},
                  {"batch_size", c.probe.batch_size},
                  {"lr", c.probe.lr},
                  {"hvp", to_string(c.probe.mode)},
                  {"eps", c.probe.eps}};
    j["corpus"] = c.corpus;
    j["output_dir"] = c.output_dir;
    j["seed"] = c.seed;
    return j;
}

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    Section top(j, "config");
    if (const json* m = top.sub("model")) c.model = model_config_from_json(*m);
    if (const json* t = top.sub("train")) {
        Section s(*t, "train");
        s.get("steps", c.train.steps);
        s.get("batch_size", c.train.batch_size);
        s.get("lr", c.train.lr);
        s.get("mask_rate", c.train.mask_rate);
        s.get("clip_norm", c.train.clip_norm);
        s.get("weight_decay", c.train.weight_decay);
        s.get("terminal_window", c.train.terminal_window);
        s.finish();
        if (c.train.steps < 1 || c.train.batch_size < 1) throw ConfigurationError("config: train.steps and train.batch_size must be >= 1");
        if (!(c.train.mask_rate > 0.0 && c.train.mask_rate < 1.0)) throw ConfigurationError("config: train.mask_rate must lie in (0, 1)");
        if (!(c.train.clip_norm > 0.0)) throw ConfigurationError("config: train.clip_norm must be positive");
    }
    if (const json* sw = top.sub("sweep")) {
        Section s(*sw, "sweep");
        std::vector<std::string> layouts;
        s.get("layouts", layouts);
        if (sw->contains("layouts")) {
            c.sweep.layouts.clear();
            for (const auto& l : layouts) c.sweep.layouts.push_back(parse_layout(l));
        }
        s.get("lrs", c.sweep.lrs);
        s.get("seeds", c.sweep.seeds);
        s.get("workers", c.sweep.workers);
        s.finish();
        if (c.sweep.layouts.empty() || c.sweep.lrs.empty() || c.sweep.seeds.empty())
            throw ConfigurationError("config: sweep.layouts, sweep.lrs and sweep.seeds must be nonempty");
        for (double lr : c.sweep.lrs)
            if (!(lr >= 0.0)) throw ConfigurationError("config: sweep.lrs entries must be >= 0");
    }
    if (const json* p = top.sub("probe")) {
        Section s(*p, "probe");
        s.get("warmup_batches", c.probe.warmup_batches);
        s.get("warmup_steps", c.probe.warmup_steps);
        s.get("probe_steps", c.probe.probe_steps);
        s.get("batch_size", c.probe.batch_size);
        s.get("lr", c.probe.lr);
        std::string mode = to_string(c.probe.mode);
        s.get("hvp", mode);
        c.probe.mode = parse_hvp_mode(mode);
        s.get("eps", c.probe.eps);
        s.finish();
        if (!(c.probe.lr > 0.0)) throw ConfigurationError("config: probe.lr must be positive");
        if (!(c.probe.eps > 0.0)) throw ConfigurationError("config: probe.eps must be positive");
    }
    top.get("corpus", c.corpus);
    top.get("output_dir", c.output_dir);
    top.get("seed", c.seed);
    top.finish();
    return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigurationError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return experiment_config_from_json(j);
}

std::string config_hash(const ModelConfig& m) { return fnv1a_hex(to_json(m).dump()); }

std::string config_hash(const ExperimentConfig& c) {
    ordered_json j = to_json(c);
    j.erase("output_dir");
    return fnv1a_hex(j.dump());
}

void save_checkpoint(const std::string& path, const ModelConfig& config, const ParameterStore& store,
                     std::int64_t step) {
    ordered_json header;
    header["schema"] = kSchema;
    header["config_hash"] = config_hash(config);
    header["step"] = step;
    header["config"] = to_json(config);
    ordered_json slots = ordered_json::array();
    for (const auto& s : store.slots()) slots.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    header["slots"] = slots;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(kMagic, sizeof kMagic);
    write_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const Vector& v = store.values();
    for (Index k = 0; k < v.size(); ++k) write_u64_le(out, std::bit_cast<std::uint64_t>(v(k)));
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw IoError("'" + path + "' is not a checkpoint");
    const std::uint64_t hlen = read_u64_le(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw IoError("checkpoint '" + path + "' is truncated");
    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        throw IoError("checkpoint '" + path + "' has a corrupt header: " + e.what());
    }
    Checkpoint ck;
    try {
        if (header.at("schema").get<int>() != kSchema) throw IoError("checkpoint '" + path + "' has an unknown schema");
        ck.config = model_config_from_json(header.at("config"));
        ck.config_hash = header.at("config_hash").get<std::string>();
        ck.step = header.at("step").get<std::int64_t>();
        Index offset = 0;
        for (const auto& s : header.at("slots")) {
            ParameterStore::Slot slot{s.at("name").get<std::string>(), s.at("rows").get<Index>(), s.at("cols").get<Index>(),
                                      offset};
            offset += slot.size();
            ck.slots.push_back(slot);
        }
        const std::size_t body = bytes.size() - 16 - hlen;
        if (body != static_cast<std::size_t>(offset) * 8) throw IoError("checkpoint '" + path + "' is truncated");
        ck.values.resize(offset);
        const unsigned char* p = bytes.data() + 16 + hlen;
        for (Index k = 0; k < offset; ++k) ck.values(k) = std::bit_cast<double>(read_u64_le(p + 8 * k));
    } catch (const json::exception& e) {
        throw IoError("checkpoint '" + path + "' has a malformed header: " + e.what());
    }
    return ck;
}

Vector load_checkpoint_for(const std::string& path, const Model& model) {
    Checkpoint ck = load_checkpoint(path);
    const std::string expected = config_hash(model.config());
    if (ck.config_hash != expected)
        throw CompatibilityError("checkpoint config hash " + ck.config_hash + " does not match model config hash " +
                                 expected);
    const auto& slots = model.params().slots();
    bool same = slots.size() == ck.slots.size();
    for (std::size_t k = 0; same && k < slots.size(); ++k)
        same = slots[k].name == ck.slots[k].name && slots[k].rows == ck.slots[k].rows &&
               slots[k].cols == ck.slots[k].cols;
    if (!same) throw CompatibilityError("checkpoint slot layout does not match the model");
    return ck.values;
}

}  // namespace consensus
