#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "consensus/config.hpp"

using namespace consensus;
using nlohmann::json;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("consensus_test_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig small() {
    ModelConfig m;
    m.layers = 2;
    m.heads = 2;
    m.d = 8;
    m.seq_len = 8;
    m.rank = 2;
    m.edge_hidden = 4;
    return m;
}

}  // namespace

TEST_CASE("experiment config JSON round trip") {
    ExperimentConfig c;
    c.model = small();
    c.model.layout = Layout::MIX;
    c.train.steps = 77;
    c.train.lr = 3e-3;
    c.sweep.layouts = {Layout::SW, Layout::SC};
    c.sweep.lrs = {1e-4, 1e-2};
    c.sweep.seeds = {1, 2, 3};
    c.probe.mode = HvpMode::exact;
    c.probe.lr = 0.5;
    c.corpus = "data/corpus.txt";
    c.seed = 9;
    const nlohmann::ordered_json j = to_json(c);
    const ExperimentConfig back = experiment_config_from_json(j);
    CHECK(to_json(back).dump() == j.dump());
    CHECK(config_hash(back) == config_hash(c));
    CHECK(back.model.layout == Layout::MIX);
    CHECK(back.sweep.seeds.size() == 3);

    const ExperimentConfig defaults = experiment_config_from_json(json::object());
    CHECK(to_json(defaults).dump() == to_json(ExperimentConfig{}).dump());
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS(experiment_config_from_json(json{{"modle", json::object()}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json{{"model", {{"dd", 4}}}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json{{"model", {{"d", "wide"}}}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json{{"model", {{"layout", "XX"}}}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json{{"model", {{"d", 10}, {"heads", 4}}}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json{{"sweep", {{"lrs", {1e-3, "x"}}}}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json{{"probe", {{"hvp", "sometimes"}}}}), ConfigurationError);
    CHECK_THROWS_AS(experiment_config_from_json(json::array()), ConfigurationError);
    CHECK_THROWS_AS(load_experiment_config(temp_path("does_not_exist.json")), IoError);

    const std::string bad = temp_path("bad.json");
    std::ofstream(bad) << "{ \"model\": ";
    CHECK_THROWS_AS(load_experiment_config(bad), ConfigurationError);
    std::remove(bad.c_str());
}

TEST_CASE("config hash") {
    const ModelConfig a = small();
    ModelConfig b = small();
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    b.rank = 3;
    CHECK(config_hash(a) != config_hash(b));

    ExperimentConfig x, y;
    y.output_dir = "/elsewhere";
    CHECK(config_hash(x) == config_hash(y));
    y.seed = 1;
    CHECK(config_hash(x) != config_hash(y));
}

TEST_CASE("checkpoint round trip") {
    Model model(small());
    Rng rng(1);
    model.initialize(rng);
    const std::string p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
    save_checkpoint(p1, model.config(), model.params(), 42);
    const Checkpoint ck = load_checkpoint(p1);
    CHECK(ck.step == 42);
    CHECK(ck.config_hash == config_hash(model.config()));
    CHECK(ck.values == model.params().values());
    CHECK(ck.slots.size() == model.params().slots().size());

    Model again(ck.config);
    again.params().set_values(load_checkpoint_for(p1, again));
    save_checkpoint(p2, again.config(), again.params(), 42);
    CHECK(slurp(p1) == slurp(p2));

    ModelConfig other = small();
    other.layout = Layout::SA;
    CHECK_THROWS_AS(load_checkpoint_for(p1, Model(other)), CompatibilityError);

    const std::string raw = slurp(p1);
    const std::string cut = temp_path("cut.ckpt");
    std::ofstream(cut, std::ios::binary) << raw.substr(0, raw.size() - 3);
    CHECK_THROWS_AS(load_checkpoint(cut), IoError);
    std::ofstream(cut, std::ios::binary) << "NOTACKPT and more bytes";
    CHECK_THROWS_AS(load_checkpoint(cut), IoError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), IoError);
    for (const auto& p : {p1, p2, cut}) std::remove(p.c_str());
}
