#include "deq/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>

namespace deq {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt_double(const char* pattern, double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const char* name) {
  if (!j.is_array() || j.empty() || !j.front().is_array()) {
    throw ConfigError(std::string("checkpoint field '") + name + "': expected a non-empty array of rows");
  }
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j.front().size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != static_cast<std::size_t>(m.cols())) {
      throw ConfigError(std::string("checkpoint field '") + name + "': ragged rows");
    }
    for (std::size_t k = 0; k < j[i].size(); ++k) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = j[i][k].get<double>();
    }
  }
  return m;
}

json vector_to_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Vector vector_from_json(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

struct Prepared {
  RunConfig cfg;
  json cfg_json;
  fs::path out;
};

Prepared prepare(const CliOptions& opts) {
  Prepared p;
  std::vector<std::string> overrides = opts.overrides;
  if (opts.seed) overrides.push_back("train.seed=" + std::to_string(*opts.seed));
  p.cfg = load_config(opts.config_path, overrides);
  p.cfg_json = config_to_json(p.cfg);
  p.out = opts.out_dir.empty() ? fs::path(".") : fs::path(opts.out_dir);
  std::error_code ec;
  fs::create_directories(p.out, ec);
  if (ec) throw ConfigError("cannot create output directory '" + p.out.string() + "': " + ec.message());
  return p;
}

/// Shared body of train and compare-grads.
int run_and_record(const std::string& command, Prepared p, std::ostream& out, std::ostream& err) {
  RunManifest manifest;
  manifest.command = command;
  manifest.config = p.cfg_json;
  manifest.seed = p.cfg.train.seed;
  manifest.start_timestamp = utc_timestamp();

  const DataSplits data = make_datasets(p.cfg.data);
  DeqModel model = init_model(data.train.input_dim(), data.train.num_classes, p.cfg.model, p.cfg.train.seed);

  const fs::path curves_path = p.out / "curves.csv";
  const fs::path probes_path = p.out / "probes.csv";
  const fs::path checkpoint_path = p.out / "checkpoint.json";
  const fs::path manifest_path = p.out / "manifest.json";
  std::ofstream curves(curves_path);
  std::ofstream probes(probes_path);
  if (!curves || !probes) throw ConfigError("cannot write outputs under '" + p.out.string() + "'");
  curves << kCurvesHeader << '\n' << std::flush;
  probes << kProbesHeader << '\n' << std::flush;

  RunCallbacks cb;
  cb.on_epoch = [&](const EpochRow& row) {
    curves << format_curves_row(row) << '\n' << std::flush;
    out << "epoch " << row.epoch << " loss " << fmt_double("%.5f", row.train_loss) << " train_acc "
        << fmt_double("%.4f", row.train_acc) << " test_acc " << fmt_double("%.4f", row.test_acc) << '\n';
  };
  cb.on_probe = [&](const std::vector<ProbeRow>& rows) {
    for (const auto& r : rows) probes << format_probe_row(r) << '\n';
    probes << std::flush;
  };

  int code = kExitOk;
  RunRecord record;
  const auto start = Clock::now();
  try {
    record = run_training(model, data.train, data.test, p.cfg.train, cb);
  } catch (const TrainingDivergence& e) {
    err << "error: " << e.what() << '\n';
    manifest.status = "diverged";
    code = kExitDiverged;
  }
  manifest.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  curves.close();
  probes.close();
  save_checkpoint(model, checkpoint_path.string());

  manifest.outputs = {curves_path.string(), probes_path.string(), checkpoint_path.string()};
  manifest.forward_iterations = record.total_fwd_iterations;
  manifest.backward_vjps = record.total_bwd_vjps;
  manifest.extra = {{"pretrain_seconds", record.pretrain_seconds},
                    {"steps", record.steps},
                    {"diverged_samples", record.diverged_samples},
                    {"train_seconds", record.total_seconds}};
  if (!record.epochs.empty()) {
    manifest.extra["final_test_acc"] = record.epochs.back().test_acc;
    manifest.extra["final_train_acc"] = record.epochs.back().train_acc;
  }
  write_json(manifest_to_json(manifest), manifest_path);
  out << "wrote " << manifest_path.string() << '\n';
  return code;
}

template <typename Body>
int guarded(Body&& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
  }
  return kExitConfig;
}

}  // namespace

json manifest_to_json(const RunManifest& m) {
  return json{{"command", m.command},
              {"config", m.config},
              {"version", m.version},
              {"seed", m.seed},
              {"start_timestamp", m.start_timestamp},
              {"status", m.status},
              {"outputs", m.outputs},
              {"totals",
               {{"wall_seconds", m.wall_seconds},
                {"forward_iterations", m.forward_iterations},
                {"backward_vjps", m.backward_vjps}}},
              {"extra", m.extra}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.version = j.at("version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.start_timestamp = j.at("start_timestamp").get<std::string>();
  m.status = j.at("status").get<std::string>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  const auto& t = j.at("totals");
  m.wall_seconds = t.at("wall_seconds").get<double>();
  m.forward_iterations = t.at("forward_iterations").get<long>();
  m.backward_vjps = t.at("backward_vjps").get<long>();
  m.extra = j.at("extra");
  return m;
}

json speedup_to_json(const SpeedupReport& r) {
  json rows = json::array();
  for (const auto& s : r.rows) {
    rows.push_back({{"strategy", std::string(strategy_name(s.strategy))},
                    {"median_seconds_per_backward", s.median_seconds},
                    {"mean_seconds_per_backward", s.mean_seconds},
                    {"vjps_per_backward", s.vjps_per_backward},
                    {"max_vjps", s.max_vjps},
                    {"speedup_vs_implicit", s.speedup}});
  }
  return json{{"strategies", rows},
              {"trials", r.trials},
              {"batch_size", r.batch_size},
              {"state_dim", r.state_dim},
              {"memory", r.memory},
              {"checkpoint", r.checkpoint},
              {"timing", "per-sample adjoint + gradient time over trials, forward excluded; speedup is the ratio of means"}};
}

SpeedupReport bench_backward(const DeqModel& model, const Dataset& data, std::size_t batch_size,
                             const SolverConfig& solver, std::span<const StrategyConfig> strategies, int trials,
                             int warmup) {
  detail::require(trials >= 1, "bench_backward: trials must be >= 1");
  detail::require(data.size() > 0, "bench_backward: empty dataset");
  detail::require(!strategies.empty(), "bench_backward: no strategies");

  struct Sample {
    const Vector* x;
    Vector v;
    FixedPointSolution<double> sol;
  };
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < data.size() && samples.size() < batch_size; ++i) {
    try {
      Prediction pred = forward_predict(model.cell, model.readout, data.features[i], solver);
      Vector v = model.readout.R.transpose() * softmax_xent(pred.logits, data.labels[i]).dlogits;
      samples.push_back({&data.features[i], std::move(v), std::move(pred.sol)});
    } catch (const DivergenceError&) {
    }
  }
  detail::require(!samples.empty(), "bench_backward: every forward solve diverged");

  const std::size_t ns = strategies.size();
  std::vector<std::vector<double>> times(ns);
  std::vector<long> vjps(ns, 0);
  std::vector<int> max_vjps(ns, 0);
  double sink = 0;
  for (int trial = -warmup; trial < trials; ++trial) {
    for (std::size_t k = 0; k < ns; ++k) {
      // Strategy order rotates every trial.
      const std::size_t s = (k + static_cast<std::size_t>(trial + warmup)) % ns;
      long trial_vjps = 0;
      const auto t0 = Clock::now();
      for (const auto& smp : samples) {
        const AdjointVector<double> adj = strategy_dispatch(strategies[s], model.cell, *smp.x, smp.sol, smp.v);
        const CellGradients<double> g = grads_from_adjoint(model.cell, *smp.x, smp.sol.z_star, adj);
        sink += g.params.gb(0);
        trial_vjps += adj.vjp_count;
        max_vjps[s] = std::max(max_vjps[s], adj.vjp_count);
      }
      const double elapsed = std::chrono::duration<double>(Clock::now() - t0).count();
      if (trial >= 0) {
        times[s].push_back(elapsed / static_cast<double>(samples.size()));
        vjps[s] += trial_vjps;
      }
    }
  }
  if (!std::isfinite(sink)) throw DivergenceError("bench_backward: non-finite gradients", {});

  SpeedupReport report;
  report.trials = trials;
  report.batch_size = static_cast<int>(samples.size());
  report.state_dim = static_cast<int>(model.cell.state_dim());
  report.memory = solver.memory;
  for (std::size_t s = 0; s < ns; ++s) {
    auto sorted = times[s];
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    double mean = 0;
    for (double t : sorted) mean += t;
    mean /= static_cast<double>(n);
    report.rows.push_back({strategy_of(strategies[s]), median, mean,
                           static_cast<double>(vjps[s]) / static_cast<double>(n * samples.size()), max_vjps[s],
                           0.0});
  }
  const auto implicit = std::find_if(report.rows.begin(), report.rows.end(),
                                     [](const StrategyTiming& t) { return t.strategy == Strategy::Implicit; });
  for (auto& row : report.rows) {
    row.speedup = implicit == report.rows.end() ? std::nan("") : implicit->mean_seconds / row.mean_seconds;
  }
  return report;
}

json model_to_json(const DeqModel& m) {
  return json{{"kind", m.cell.kind == CellKind::Tanh ? "tanh" : "linear"},
              {"W", matrix_to_json(m.cell.W)},
              {"U", matrix_to_json(m.cell.U)},
              {"b", vector_to_json(m.cell.b)},
              {"R", matrix_to_json(m.readout.R)},
              {"c", vector_to_json(m.readout.c)}};
}

DeqModel model_from_json(const json& j) {
  DeqModel m;
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "tanh" && kind != "linear") throw ConfigError("checkpoint field 'kind': unknown cell kind");
    m.cell.kind = kind == "tanh" ? CellKind::Tanh : CellKind::Linear;
    m.cell.W = matrix_from_json(j.at("W"), "W");
    m.cell.U = matrix_from_json(j.at("U"), "U");
    m.cell.b = vector_from_json(j.at("b"));
    m.readout.R = matrix_from_json(j.at("R"), "R");
    m.readout.c = vector_from_json(j.at("c"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  const auto d_z = m.cell.W.rows();
  if (m.cell.W.cols() != d_z || m.cell.U.rows() != d_z || m.cell.b.size() != d_z || m.readout.R.cols() != d_z ||
      m.readout.c.size() != m.readout.R.rows()) {
    throw ConfigError("malformed checkpoint: inconsistent shapes");
  }
  return m;
}

void save_checkpoint(const DeqModel& m, const std::string& path) { write_json(model_to_json(m), path); }

DeqModel load_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("config field 'bench.checkpoint': no checkpoint given");
  std::ifstream in(path);
  if (!in) throw ConfigError("checkpoint '" + path + "' not found");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("checkpoint '" + path + "' is not valid JSON");
  return model_from_json(j);
}

DataSplits make_datasets(const RunConfig::Data& cfg) {
  if (cfg.source == "csv") {
    Dataset train = load_dataset_csv(cfg.train_csv);
    Dataset test = load_dataset_csv(cfg.test_csv, train.num_classes);
    if (test.input_dim() != train.input_dim()) throw ConfigError("data: train/test feature dimensions differ");
    return {std::move(train), std::move(test)};
  }
  return {make_two_spirals(static_cast<std::size_t>(cfg.n_train), cfg.noise, cfg.seed),
          make_two_spirals(static_cast<std::size_t>(cfg.n_test), cfg.noise, cfg.seed + 1)};
}

std::string format_curves_row(const EpochRow& r) {
  return std::to_string(r.epoch) + "," + fmt_double("%.6f", r.wall_s) + "," + fmt_double("%.10g", r.train_loss) +
         "," + fmt_double("%.10g", r.train_acc) + "," + fmt_double("%.10g", r.test_acc) + "," +
         fmt_double("%.10g", r.fwd_iters_mean) + "," + fmt_double("%.10g", r.bwd_vjps_mean) + "," +
         fmt_double("%.10g", r.fwd_conv_rate);
}

std::string format_probe_row(const ProbeRow& r) {
  return std::to_string(r.step) + "," + std::string(strategy_name(r.strategy)) + "," +
         fmt_double("%.12g", r.cosine) + "," + std::to_string(r.dot_sign);
}

int cmd_train(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded([&] { return run_and_record("train", prepare(opts), out, err); }, err);
}

int cmd_compare_grads(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        Prepared p = prepare(opts);
        if (p.cfg.train.fidelity_every <= 0) {
          throw ConfigError("config field 'train.fidelity_every': must be > 0 for compare-grads");
        }
        // Train with the Implicit reference; all four strategies are probed.
        p.cfg.train.strategy = p.cfg.train.probe_strategies.front();
        p.cfg_json["strategy"]["variant"] = "implicit";
        return run_and_record("compare-grads", std::move(p), out, err);
      },
      err);
}

int cmd_bench_backward(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        Prepared p = prepare(opts);
        RunManifest manifest;
        manifest.command = "bench-backward";
        manifest.config = p.cfg_json;
        manifest.seed = p.cfg.train.seed;
        manifest.start_timestamp = utc_timestamp();
        const auto start = Clock::now();

        const DeqModel model = load_checkpoint(p.cfg.bench.checkpoint);
        const DataSplits data = make_datasets(p.cfg.data);
        if (data.train.input_dim() != model.cell.input_dim()) {
          throw ConfigError("checkpoint input dimension does not match the dataset");
        }
        const auto before = vjp_count_total();
        SpeedupReport report =
            bench_backward(model, data.train, static_cast<std::size_t>(p.cfg.bench.batch_size), p.cfg.train.solver,
                           p.cfg.train.probe_strategies, p.cfg.bench.trials, p.cfg.bench.warmup);
        report.checkpoint = p.cfg.bench.checkpoint;

        const fs::path report_path = p.out / "speedup.json";
        write_json(speedup_to_json(report), report_path);
        for (const auto& r : report.rows) {
          out << strategy_name(r.strategy) << ": " << fmt_double("%.3e", r.median_seconds) << " s/backward, "
              << fmt_double("%.2f", r.vjps_per_backward) << " VJPs, speedup " << fmt_double("%.2f", r.speedup)
              << "x\n";
        }
        manifest.outputs = {report_path.string()};
        manifest.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
        manifest.backward_vjps = static_cast<long>(vjp_count_total() - before);
        write_json(manifest_to_json(manifest), p.out / "manifest.json");
        return static_cast<int>(kExitOk);
      },
      err);
}

namespace {

struct DemoInstance {
  CellParams<double> cell;
  Vector x;
};

DemoInstance make_demo(const RunConfig::Demo& d) {
  DemoInstance inst;
  if (d.kind == "scalar_linear") {
    inst.cell = CellParams<double>::zeros(1, 1, CellKind::Linear);
    inst.cell.W(0, 0) = 0.5;
    inst.cell.U(0, 0) = 1.0;
    inst.x = Vector::Ones(1);
    return inst;
  }
  std::mt19937_64 rng(d.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index n = d.dim;
  auto draw = [&](Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
    return m;
  };
  if (d.kind == "constant") {
    inst.cell = CellParams<double>::zeros(n, n, CellKind::Linear);
    inst.cell.U = draw(n, n);
    inst.cell.b = draw(n, 1);
  } else {
    inst.cell = CellParams<double>::zeros(n, n, CellKind::Tanh);
    inst.cell.W = draw(n, n);
    inst.cell.U = draw(n, n);
    inst.cell.b = draw(n, 1);
    inst.cell = spectral_rescale(std::move(inst.cell), 0.9);
  }
  inst.x = draw(n, 1);
  return inst;
}

void write_trace(const fs::path& path, const std::vector<double>& trace) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << kTraceHeader << '\n';
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << fmt_double("%.17g", trace[i]) << '\n';
}

}  // namespace

int cmd_solve_demo(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        Prepared p = prepare(opts);
        const DemoInstance inst = make_demo(p.cfg.demo);
        SolverConfig solver = p.cfg.train.solver;
        solver.tol = p.cfg.demo.tol;
        solver.max_iter = p.cfg.demo.max_iter;
        const Vector z0 = initial_state<double>(inst.cell.state_dim(), solver);

        const fs::path broyden_path = p.out / "broyden_trace.csv";
        const fs::path picard_path = p.out / "picard_trace.csv";
        int code = kExitOk;
        auto run = [&](const char* name, const fs::path& path, auto&& solve) {
          try {
            const FixedPointSolution<double> sol = solve();
            write_trace(path, sol.residual_trace);
            out << name << ": converged=" << (sol.converged ? "true" : "false") << " iterations=" << sol.iterations
                << " residual=" << fmt_double("%.3e", sol.residual_norm) << '\n';
          } catch (const DivergenceError& e) {
            write_trace(path, e.trace());
            err << "error: " << e.what() << '\n';
            code = kExitDiverged;
          }
        };
        run("broyden", broyden_path, [&] { return broyden_solve(inst.cell, inst.x, z0, solver); });
        run("picard", picard_path, [&] { return picard_solve(inst.cell, inst.x, z0, solver); });

        RunManifest manifest;
        manifest.command = "solve-demo";
        manifest.config = p.cfg_json;
        manifest.seed = p.cfg.demo.seed;
        manifest.start_timestamp = utc_timestamp();
        manifest.status = code == kExitOk ? "ok" : "diverged";
        manifest.outputs = {broyden_path.string(), picard_path.string()};
        write_json(manifest_to_json(manifest), p.out / "manifest.json");
        return code;
      },
      err);
}

}  // namespace deq
