#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "deq/training.hpp"

namespace deq {

/// Everything a CLI run needs, resolved from a JSON config file plus dotted
/// key=value overrides.
struct RunConfig {
  struct Data {
    std::string source = "two_spirals";  // two_spirals | csv
    int n_train = 2000;
    int n_test = 1000;
    double noise = 0.05;
    std::uint64_t seed = 1;
    std::string train_csv;
    std::string test_csv;
  } data;

  ModelConfig model;
  TrainConfig train;

  struct Bench {
    std::string checkpoint;
    int trials = 20;
    int batch_size = 64;
    int warmup = 2;
  } bench;

  struct Demo {
    std::string kind = "tanh";  // scalar_linear | constant | tanh
    int dim = 8;
    std::uint64_t seed = 0;
    double tol = 1e-8;
    int max_iter = 200;
  } demo;
};

/// The defaults as a JSON document; also the schema that config files and
/// overrides are checked against.
nlohmann::json default_config_json();

/// Throws ConfigError naming the offending field.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);

/// Overlays `patch` onto `base`. Unknown keys and type mismatches throw ConfigError.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix = "");

/// "a.b.c=value"; value parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

/// Defaults <- file (if path non-empty) <- overrides.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

StrategyConfig strategy_from_json(const nlohmann::json& strategy_section);
nlohmann::json strategy_to_json(const StrategyConfig& s, const nlohmann::json& defaults);

}  // namespace deq
