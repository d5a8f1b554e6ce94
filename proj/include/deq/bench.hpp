#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deq/config.hpp"
#include "deq/training.hpp"

namespace deq {

inline constexpr const char* kVersion = "deq-train 0.1.0";

inline constexpr const char* kCurvesHeader =
    "epoch,wall_s,train_loss,train_acc,test_acc,fwd_iters_mean,bwd_vjps_mean,fwd_conv_rate";
inline constexpr const char* kProbesHeader = "step,strategy,cosine,dot_sign";
inline constexpr const char* kTraceHeader = "iteration,residual_norm";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitDiverged = 3 };

struct CliOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
};

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string start_timestamp;
  std::string status = "ok";
  std::vector<std::string> outputs;
  double wall_seconds = 0;
  long forward_iterations = 0;
  long backward_vjps = 0;
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

struct StrategyTiming {
  Strategy strategy;
  double median_seconds;  // per backward pass (one sample)
  double mean_seconds;
  double vjps_per_backward;
  int max_vjps;
  double speedup;  // implicit median / this median
};

struct SpeedupReport {
  std::vector<StrategyTiming> rows;
  int trials = 0;
  int batch_size = 0;
  int state_dim = 0;
  std::size_t memory = 0;
  std::string checkpoint;
};

nlohmann::json speedup_to_json(const SpeedupReport& r);

/// Times adjoint + gradient assembly per strategy on a fixed batch. Forward
/// solves happen once, outside the timed region. Median over `trials` after
/// `warmup` discarded rounds.
SpeedupReport bench_backward(const DeqModel& model, const Dataset& data, std::size_t batch_size,
                             const SolverConfig& solver, std::span<const StrategyConfig> strategies, int trials,
                             int warmup);

nlohmann::json model_to_json(const DeqModel& m);
DeqModel model_from_json(const nlohmann::json& j);
void save_checkpoint(const DeqModel& m, const std::string& path);
/// Throws ConfigError when the file is missing or malformed.
DeqModel load_checkpoint(const std::string& path);

struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits make_datasets(const RunConfig::Data& cfg);

std::string format_curves_row(const EpochRow& row);
std::string format_probe_row(const ProbeRow& row);

/// CLI subcommands. Return the process exit code; diagnostics go to `err`.
int cmd_train(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_compare_grads(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_bench_backward(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_solve_demo(const CliOptions& opts, std::ostream& out, std::ostream& err);

}  // namespace deq
