#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "consensus/stability.hpp"

namespace consensus {

struct SweepSettings {
    std::vector<Layout> layouts{Layout::SA, Layout::SC};
    std::vector<double> lrs{1e-3};
    std::vector<std::uint64_t> seeds{0};
    unsigned workers = 0;
};

/// Everything a CLI command can read from a config file. Every section and key is optional;
/// unknown keys are rejected.
struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    SweepSettings sweep;
    ProbeConfig probe;
    std::string corpus;
    std::string output_dir = ".";
    std::uint64_t seed = 0;
};

nlohmann::ordered_json to_json(const ModelConfig& m);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const ExperimentConfig& c);
/// Throws ConfigurationError for unknown keys, wrong types or invalid values.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// Throws IoError when unreadable, ConfigurationError when malformed.
ExperimentConfig load_experiment_config(const std::string& path);

/// 16 hex digits of FNV-1a over the canonical JSON of the model config.
std::string config_hash(const ModelConfig& m);
/// Hash of a whole experiment config (model, train, sweep, probe, corpus, seed).
std::string config_hash(const ExperimentConfig& c);

// --- checkpoints -----------------------------------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    std::string config_hash;
    std::int64_t step = 0;
    /// Slot names, shapes and offsets in store order.
    std::vector<ParameterStore::Slot> slots;
    Vector values;
};

/// Layout: 8-byte magic "CNSCKPT1", little-endian u64 header length, JSON header
/// {schema, config_hash, step, config, slots}, then the flat parameters as little-endian
/// IEEE-754 doubles.
void save_checkpoint(const std::string& path, const ModelConfig& config, const ParameterStore& store,
                     std::int64_t step);
/// Throws IoError when missing, truncated or not a checkpoint.
Checkpoint load_checkpoint(const std::string& path);
/// Loads parameters for `model`; throws CompatibilityError when the config hash or the slot
/// layout differs.
Vector load_checkpoint_for(const std::string& path, const Model& model);

}  // namespace consensus
