#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "deq/bench.hpp"

using namespace deq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "deq_bench_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

// Small, fast run settings shared by the CLI tests.
std::vector<std::string> small_run(std::vector<std::string> extra = {}) {
  std::vector<std::string> o = {"data.n_train=128", "data.n_test=64", "model.d_z=8", "train.epochs=2",
                                "train.batch_size=32", "train.fidelity_every=2"};
  o.insert(o.end(), extra.begin(), extra.end());
  return o;
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(int (*cmd)(const CliOptions&, std::ostream&, std::ostream&), const CliOptions& opts) {
  std::ostringstream out, err;
  const int code = cmd(opts, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("config overrides and validation") {
  auto j = default_config_json();
  apply_override(j, "strategy.variant=jfb");
  apply_override(j, "train.epochs=7");
  apply_override(j, "solver.tol=1e-9");
  const auto cfg = config_from_json(j);
  CHECK(strategy_of(cfg.train.strategy) == Strategy::JFB);
  CHECK(cfg.train.epochs == 7);
  CHECK(cfg.train.solver.tol == 1e-9);

  const auto defaults = config_from_json(default_config_json());
  CHECK(defaults.model.d_z == 32);
  CHECK(defaults.train.batch_size == 64);
  CHECK(defaults.train.learning_rate == 0.05);
  CHECK(defaults.train.epochs == 200);
  CHECK(defaults.train.solver.max_iter == 18);
  CHECK(defaults.train.solver.memory == 32);
  CHECK(defaults.train.pretrain.unroll_depth == 8);
  CHECK(defaults.train.pretrain.epochs == 10);

  auto unknown = default_config_json();
  CHECK_THROWS_WITH_AS(apply_override(unknown, "train.epochz=3"), doctest::Contains("train.epochz"), ConfigError);
  auto mismatch = default_config_json();
  CHECK_THROWS_WITH_AS(apply_override(mismatch, "train.epochs=\"many\""), doctest::Contains("train.epochs"),
                       ConfigError);
  auto bad = default_config_json();
  apply_override(bad, "strategy.variant=bogus");
  CHECK_THROWS_WITH_AS(config_from_json(bad), doctest::Contains("bogus"), ConfigError);
  auto few = default_config_json();
  apply_override(few, "bench.trials=3");
  CHECK_THROWS_AS(config_from_json(few), ConfigError);

  CHECK(config_to_json(cfg) == config_to_json(config_from_json(config_to_json(cfg))));
}

TEST_CASE("manifest round-trip") {
  RunManifest m;
  m.command = "train";
  m.config = default_config_json();
  m.seed = 42;
  m.start_timestamp = "2026-01-01T00:00:00Z";
  m.outputs = {"a.csv", "b.json"};
  m.wall_seconds = 1.25;
  m.forward_iterations = 123;
  m.backward_vjps = 456;
  m.extra = json{{"note", "x"}};
  const json j = manifest_to_json(m);
  CHECK(j.contains("totals"));
  const auto back = manifest_from_json(j);
  CHECK(manifest_to_json(back) == j);
  CHECK(back.outputs == m.outputs);
  CHECK(back.backward_vjps == 456);
}

TEST_CASE("train command") {
  const auto dir = fresh_dir("train");
  CliOptions opts;
  opts.out_dir = dir.string();
  opts.overrides = small_run({"train.epochs=1"});
  const auto r = run(cmd_train, opts);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);

  const auto curves = lines_of(dir / "curves.csv");
  REQUIRE(curves.size() == 2);
  CHECK(curves[0] == kCurvesHeader);
  CHECK(split(curves[1]).size() == 8);
  CHECK(lines_of(dir / "probes.csv").at(0) == kProbesHeader);

  const auto manifest = manifest_from_json(json::parse(slurp(dir / "manifest.json")));
  CHECK(manifest.status == "ok");
  CHECK(manifest.command == "train");
  CHECK(manifest.version == kVersion);
  CHECK_FALSE(manifest.outputs.empty());
  for (const auto& o : manifest.outputs) {
    const fs::path p = fs::path(o).is_absolute() ? fs::path(o) : dir / o;
    CHECK_MESSAGE(fs::exists(p), o);
    CHECK_MESSAGE(fs::file_size(p) > 0, o);
  }
  CHECK(manifest.forward_iterations > 0);
  CHECK(manifest.config["train"]["epochs"] == 1);
}

TEST_CASE("train command reports bad configuration with exit code 2") {
  const auto dir = fresh_dir("bad");
  CliOptions opts;
  opts.out_dir = dir.string();
  opts.overrides = {"strategy.variant=bogus"};
  auto r = run(cmd_train, opts);
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("bogus") != std::string::npos);

  opts.overrides = {"nosuch.key=1"};
  r = run(cmd_train, opts);
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("nosuch") != std::string::npos);

  opts.overrides = {};
  opts.config_path = (dir / "missing.json").string();
  CHECK(run(cmd_train, opts).code == kExitConfig);

  std::ofstream(dir / "broken.json") << "{ not json";
  opts.config_path = (dir / "broken.json").string();
  CHECK(run(cmd_train, opts).code == kExitConfig);
}

TEST_CASE("config file plus overrides") {
  const auto dir = fresh_dir("config_file");
  std::ofstream(dir / "cfg.json") << R"({"train": {"epochs": 1}, "data": {"n_train": 64, "n_test": 32}, "model": {"d_z": 4}})";
  CliOptions opts;
  opts.config_path = (dir / "cfg.json").string();
  opts.out_dir = dir.string();
  opts.overrides = {"strategy.variant=npg"};
  opts.seed = 9;
  REQUIRE(run(cmd_train, opts).code == kExitOk);
  const auto j = json::parse(slurp(dir / "manifest.json"));
  CHECK(j["config"]["strategy"]["variant"] == "npg");
  CHECK(j["config"]["data"]["n_train"] == 64);
  CHECK(j["seed"] == 9);
}

TEST_CASE("compare-grads command") {
  const auto dir = fresh_dir("compare");
  CliOptions opts;
  opts.out_dir = dir.string();
  opts.overrides = small_run({"train.epochs=3", "train.fidelity_every=1"});
  REQUIRE(run(cmd_compare_grads, opts).code == kExitOk);

  const auto rows = lines_of(dir / "probes.csv");
  REQUIRE(rows.size() > 1);
  CHECK(rows[0] == kProbesHeader);
  int implicit = 0, jfb = 0, jfb_positive = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i]);
    REQUIRE(f.size() == 4);
    if (f[1] == "implicit") {
      ++implicit;
      CHECK(std::stod(f[2]) == 1.0);
    }
    if (f[1] == "jfb") {
      ++jfb;
      jfb_positive += f[3] == "1";
    }
  }
  CHECK(implicit == 12);
  CHECK(jfb == 12);
  CHECK(jfb_positive >= 0.95 * jfb);

  const auto scalar = fresh_dir("compare_scalar");
  opts.out_dir = scalar.string();
  opts.overrides = small_run({"model.d_z=1", "model.kind=\"linear\"", "solver.tol=1e-10", "solver.max_iter=50",
                              "strategy.implicit_tol=1e-13", "strategy.implicit_max_iter=200",
                              "train.fidelity_every=1"});
  REQUIRE(run(cmd_compare_grads, opts).code == kExitOk);
  int gdeq = 0;
  for (const auto& line : lines_of(scalar / "probes.csv")) {
    const auto f = split(line);
    if (f[1] != "gdeq") continue;
    ++gdeq;
    CHECK(std::stod(f[2]) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(gdeq == 8);

  opts.overrides = {"train.fidelity_every=0"};
  CHECK(run(cmd_compare_grads, opts).code == kExitConfig);
}

TEST_CASE("bench-backward command") {
  const auto dir = fresh_dir("bench");
  CliOptions opts;
  opts.out_dir = dir.string();
  opts.overrides = small_run({"train.epochs=1"});
  REQUIRE(run(cmd_train, opts).code == kExitOk);

  opts.overrides = small_run({"bench.checkpoint=\"" + (dir / "checkpoint.json").string() + "\"", "bench.trials=10",
                              "bench.batch_size=16"});
  const auto r = run(cmd_bench_backward, opts);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const auto j = json::parse(slurp(dir / "speedup.json"));
  REQUIRE(j["strategies"].size() == 4);
  for (const auto& row : j["strategies"]) {
    const auto name = row["strategy"].get<std::string>();
    const double vjps = row["vjps_per_backward"].get<double>();
    const int max_vjps = row["max_vjps"].get<int>();
    if (name == "implicit") {
      CHECK(row["speedup_vs_implicit"].get<double>() == 1.0);
      CHECK(max_vjps <= 20);
      CHECK(vjps >= 1.0);
    } else if (name == "npg") {
      CHECK(vjps == 4.0);
      CHECK(max_vjps == 4);
    } else {
      CHECK(vjps == 0.0);
      CHECK(max_vjps == 0);
    }
  }
  CHECK(fs::exists(dir / "manifest.json"));

  opts.overrides = {"bench.checkpoint=\"" + (dir / "nope.json").string() + "\""};
  CHECK(run(cmd_bench_backward, opts).code == kExitConfig);
  opts.overrides = {};
  CHECK(run(cmd_bench_backward, opts).code == kExitConfig);
}

TEST_CASE("checkpoint round-trip") {
  const auto dir = fresh_dir("checkpoint");
  const auto m = init_model(2, 2, ModelConfig{6}, 3);
  save_checkpoint(m, (dir / "m.json").string());
  const auto back = load_checkpoint((dir / "m.json").string());
  CHECK(back.cell.W == m.cell.W);
  CHECK(back.cell.U == m.cell.U);
  CHECK(back.cell.b == m.cell.b);
  CHECK(back.readout.R == m.readout.R);
  CHECK(back.readout.c == m.readout.c);
  CHECK(back.cell.kind == m.cell.kind);
}

TEST_CASE("solve-demo command") {
  const auto dir = fresh_dir("demo");
  CliOptions opts;
  opts.out_dir = dir.string();

  opts.overrides = {"demo.kind=scalar_linear"};
  REQUIRE(run(cmd_solve_demo, opts).code == kExitOk);
  auto b = lines_of(dir / "broyden_trace.csv");
  CHECK(b.at(0) == kTraceHeader);
  REQUIRE(b.size() == 4);
  CHECK(split(b[3])[0] == "2");
  CHECK(std::stod(split(b[3])[1]) == 0.0);

  opts.overrides = {"demo.kind=constant"};
  REQUIRE(run(cmd_solve_demo, opts).code == kExitOk);
  CHECK(lines_of(dir / "broyden_trace.csv").size() == 3);
  CHECK(lines_of(dir / "picard_trace.csv").size() == 3);

  opts.overrides = {"demo.kind=tanh"};
  REQUIRE(run(cmd_solve_demo, opts).code == kExitOk);
  const auto bt = lines_of(dir / "broyden_trace.csv"), pt = lines_of(dir / "picard_trace.csv");
  CHECK(bt.size() < pt.size());
  CHECK(std::stod(split(bt.back())[1]) <= 1e-8);

  opts.overrides = {"demo.kind=\"spiral\""};
  CHECK(run(cmd_solve_demo, opts).code == kExitConfig);
}

TEST_CASE("repeated runs produce identical CSVs apart from wall-clock time") {
  const auto a = fresh_dir("repro_a"), b = fresh_dir("repro_b");
  CliOptions opts;
  opts.overrides = small_run({"pretrain.enabled=true", "pretrain.epochs=1"});
  opts.out_dir = a.string();
  REQUIRE(run(cmd_train, opts).code == kExitOk);
  opts.out_dir = b.string();
  REQUIRE(run(cmd_train, opts).code == kExitOk);

  CHECK(slurp(a / "probes.csv") == slurp(b / "probes.csv"));
  const auto ca = lines_of(a / "curves.csv"), cb = lines_of(b / "curves.csv");
  REQUIRE(ca.size() == cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) {
    auto fa = split(ca[i]), fb = split(cb[i]);
    if (i > 0) fa[1] = fb[1] = "";
    CHECK(fa == fb);
  }
}
