#include "deq/config.hpp"

#include <fstream>

namespace deq {

using nlohmann::json;

namespace {

const char* type_label(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_object()) return "object";
  return "other";
}

bool compatible(const json& want, const json& got) {
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_number_integer()) return got.is_number_integer();
  if (want.is_number()) return got.is_number();
  if (want.is_string()) return got.is_string();
  if (want.is_object()) return got.is_object();
  return false;
}

template <typename T>
T field(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + section + "." + key + "': " + e.what());
  }
}

void check(bool ok, const std::string& field_name, const std::string& why) {
  if (!ok) throw ConfigError("config field '" + field_name + "': " + why);
}

}  // namespace

json default_config_json() {
  return json{
      {"data",
       {{"source", "two_spirals"},
        {"n_train", 2000},
        {"n_test", 1000},
        {"noise", 0.05},
        {"seed", 1},
        {"train_csv", ""},
        {"test_csv", ""}}},
      {"model",
       {{"d_z", 32}, {"kind", "tanh"}, {"init_gamma", 0.9}, {"input_scale", 4.0}, {"readout_scale", 0.1}}},
      {"solver",
       {{"tol", 1e-6}, {"max_iter", 18}, {"memory", 32}, {"eps_den", 1e-10}, {"random_init", false},
        {"init_seed", 0}}},
      {"strategy",
       {{"variant", "gdeq"}, {"implicit_max_iter", 20}, {"implicit_tol", 1e-6}, {"npg_k", 5},
        {"npg_lambda", 0.5}}},
      {"train",
       {{"epochs", 200},
        {"batch_size", 64},
        {"learning_rate", 0.05},
        {"momentum", 0.9},
        {"grad_clip", 1.0},
        {"seed", 0},
        {"fidelity_every", 50}}},
      {"pretrain", {{"enabled", false}, {"unroll_depth", 8}, {"epochs", 10}}},
      {"bench", {{"checkpoint", ""}, {"trials", 20}, {"batch_size", 64}, {"warmup", 2}}},
      {"demo", {{"kind", "tanh"}, {"dim", 8}, {"seed", 0}, {"tol", 1e-8}, {"max_iter", 200}}},
  };
}

void merge_config(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config: expected an object at '" + prefix + "'");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string name = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config field '" + name + "': unknown key");
    json& target = base[it.key()];
    if (!compatible(target, it.value())) {
      throw ConfigError("config field '" + name + "': expected " + type_label(target) + ", got " +
                        type_label(it.value()) + " (" + it.value().dump() + ")");
    }
    if (target.is_object()) {
      merge_config(target, it.value(), name);
    } else if (target.is_number_float()) {
      target = it.value().get<double>();
    } else {
      target = it.value();
    }
  }
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "': expected key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  // Build {"a": {"b": value}} and merge so the same checks apply.
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    parts.push_back(rest.substr(0, pos));
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_config(cfg, patch);
}

StrategyConfig strategy_from_json(const json& s) {
  const auto variant = s.at("variant").get<std::string>();
  Strategy kind;
  try {
    kind = parse_strategy(variant);
  } catch (const ConfigError&) {
    throw ConfigError("config field 'strategy.variant': unknown strategy '" + variant + "'");
  }
  StrategyConfig out;
  switch (kind) {
    case Strategy::Implicit:
      out = ImplicitConfig{s.at("implicit_max_iter").get<int>(), s.at("implicit_tol").get<double>()};
      break;
    case Strategy::JFB: out = JfbConfig{}; break;
    case Strategy::NPG: out = NpgConfig{s.at("npg_k").get<int>(), s.at("npg_lambda").get<double>()}; break;
    case Strategy::GDEQ: out = GdeqConfig{}; break;
  }
  return out;
}

json strategy_to_json(const StrategyConfig& s, const json& defaults) {
  json j = defaults;
  j["variant"] = std::string(strategy_name(strategy_of(s)));
  if (const auto* c = std::get_if<ImplicitConfig>(&s)) {
    j["implicit_max_iter"] = c->max_iter;
    j["implicit_tol"] = c->tol;
  } else if (const auto* n = std::get_if<NpgConfig>(&s)) {
    j["npg_k"] = n->k;
    j["npg_lambda"] = n->lambda;
  }
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  auto& d = cfg.data;
  d.source = field<std::string>(j, "data", "source");
  check(d.source == "two_spirals" || d.source == "csv", "data.source",
        "expected two_spirals or csv, got '" + d.source + "'");
  d.n_train = field<int>(j, "data", "n_train");
  d.n_test = field<int>(j, "data", "n_test");
  d.noise = field<double>(j, "data", "noise");
  d.seed = field<std::uint64_t>(j, "data", "seed");
  d.train_csv = field<std::string>(j, "data", "train_csv");
  d.test_csv = field<std::string>(j, "data", "test_csv");
  if (d.source == "two_spirals") {
    check(d.n_train > 0 && d.n_train % 2 == 0, "data.n_train", "must be positive and even");
    check(d.n_test > 0 && d.n_test % 2 == 0, "data.n_test", "must be positive and even");
    check(d.noise >= 0, "data.noise", "must be non-negative");
  } else {
    check(!d.train_csv.empty(), "data.train_csv", "required when data.source is csv");
    check(!d.test_csv.empty(), "data.test_csv", "required when data.source is csv");
  }

  auto& m = cfg.model;
  m.d_z = field<int>(j, "model", "d_z");
  check(m.d_z >= 1, "model.d_z", "must be >= 1");
  const auto kind = field<std::string>(j, "model", "kind");
  check(kind == "tanh" || kind == "linear", "model.kind", "expected tanh or linear, got '" + kind + "'");
  m.kind = kind == "tanh" ? CellKind::Tanh : CellKind::Linear;
  m.init_gamma = field<double>(j, "model", "init_gamma");
  check(m.init_gamma > 0 && m.init_gamma < 1, "model.init_gamma", "must lie in (0, 1)");
  m.input_scale = field<double>(j, "model", "input_scale");
  m.readout_scale = field<double>(j, "model", "readout_scale");

  auto& s = cfg.train.solver;
  s.tol = field<double>(j, "solver", "tol");
  check(s.tol > 0, "solver.tol", "must be positive");
  s.max_iter = field<int>(j, "solver", "max_iter");
  check(s.max_iter >= 1, "solver.max_iter", "must be >= 1");
  const int memory = field<int>(j, "solver", "memory");
  check(memory >= 1, "solver.memory", "must be >= 1");
  s.memory = static_cast<std::size_t>(memory);
  s.eps_den = field<double>(j, "solver", "eps_den");
  check(s.eps_den > 0, "solver.eps_den", "must be positive");
  s.random_init = field<bool>(j, "solver", "random_init");
  s.init_seed = field<std::uint64_t>(j, "solver", "init_seed");

  cfg.train.strategy = strategy_from_json(j.at("strategy"));
  const auto& sj = j.at("strategy");
  const ImplicitConfig implicit{sj.at("implicit_max_iter").get<int>(), sj.at("implicit_tol").get<double>()};
  const NpgConfig npg{sj.at("npg_k").get<int>(), sj.at("npg_lambda").get<double>()};
  check(implicit.max_iter >= 1, "strategy.implicit_max_iter", "must be >= 1");
  check(implicit.tol > 0, "strategy.implicit_tol", "must be positive");
  check(npg.k >= 1, "strategy.npg_k", "must be >= 1");
  check(npg.lambda >= 0 && npg.lambda <= 1, "strategy.npg_lambda", "must lie in [0, 1]");
  cfg.train.probe_strategies = {implicit, JfbConfig{}, npg, GdeqConfig{}};

  auto& t = cfg.train;
  t.epochs = field<int>(j, "train", "epochs");
  check(t.epochs >= 1, "train.epochs", "must be >= 1");
  t.batch_size = field<int>(j, "train", "batch_size");
  check(t.batch_size >= 1, "train.batch_size", "must be >= 1");
  t.learning_rate = field<double>(j, "train", "learning_rate");
  check(t.learning_rate >= 0, "train.learning_rate", "must be non-negative");
  t.momentum = field<double>(j, "train", "momentum");
  check(t.momentum >= 0 && t.momentum < 1, "train.momentum", "must lie in [0, 1)");
  t.grad_clip = field<double>(j, "train", "grad_clip");
  check(t.grad_clip >= 0, "train.grad_clip", "must be non-negative (0 disables clipping)");
  t.seed = field<std::uint64_t>(j, "train", "seed");
  t.fidelity_every = field<int>(j, "train", "fidelity_every");
  check(t.fidelity_every >= 0, "train.fidelity_every", "must be >= 0");

  t.pretrain.enabled = field<bool>(j, "pretrain", "enabled");
  t.pretrain.unroll_depth = field<int>(j, "pretrain", "unroll_depth");
  check(t.pretrain.unroll_depth >= 1, "pretrain.unroll_depth", "must be >= 1");
  t.pretrain.epochs = field<int>(j, "pretrain", "epochs");
  check(t.pretrain.epochs >= 1, "pretrain.epochs", "must be >= 1");

  auto& b = cfg.bench;
  b.checkpoint = field<std::string>(j, "bench", "checkpoint");
  b.trials = field<int>(j, "bench", "trials");
  check(b.trials >= 10, "bench.trials", "must be >= 10");
  b.batch_size = field<int>(j, "bench", "batch_size");
  check(b.batch_size >= 1, "bench.batch_size", "must be >= 1");
  b.warmup = field<int>(j, "bench", "warmup");
  check(b.warmup >= 0, "bench.warmup", "must be >= 0");

  auto& dm = cfg.demo;
  dm.kind = field<std::string>(j, "demo", "kind");
  check(dm.kind == "scalar_linear" || dm.kind == "constant" || dm.kind == "tanh", "demo.kind",
        "expected scalar_linear, constant or tanh, got '" + dm.kind + "'");
  dm.dim = field<int>(j, "demo", "dim");
  check(dm.dim >= 1, "demo.dim", "must be >= 1");
  dm.seed = field<std::uint64_t>(j, "demo", "seed");
  dm.tol = field<double>(j, "demo", "tol");
  check(dm.tol > 0, "demo.tol", "must be positive");
  dm.max_iter = field<int>(j, "demo", "max_iter");
  check(dm.max_iter >= 1, "demo.max_iter", "must be >= 1");
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  json j = default_config_json();
  const auto& d = cfg.data;
  j["data"] = {{"source", d.source}, {"n_train", d.n_train}, {"n_test", d.n_test}, {"noise", d.noise},
               {"seed", d.seed},     {"train_csv", d.train_csv}, {"test_csv", d.test_csv}};
  const auto& m = cfg.model;
  j["model"] = {{"d_z", m.d_z},
                {"kind", m.kind == CellKind::Tanh ? "tanh" : "linear"},
                {"init_gamma", m.init_gamma},
                {"input_scale", m.input_scale},
                {"readout_scale", m.readout_scale}};
  const auto& s = cfg.train.solver;
  j["solver"] = {{"tol", s.tol},         {"max_iter", s.max_iter},       {"memory", s.memory},
                 {"eps_den", s.eps_den}, {"random_init", s.random_init}, {"init_seed", s.init_seed}};
  json strategy = j["strategy"];
  for (const auto& p : cfg.train.probe_strategies) strategy = strategy_to_json(p, strategy);
  j["strategy"] = strategy_to_json(cfg.train.strategy, strategy);
  const auto& t = cfg.train;
  j["train"] = {{"epochs", t.epochs},   {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
                {"momentum", t.momentum}, {"grad_clip", t.grad_clip}, {"seed", t.seed},             {"fidelity_every", t.fidelity_every}};
  j["pretrain"] = {{"enabled", t.pretrain.enabled},
                   {"unroll_depth", t.pretrain.unroll_depth},
                   {"epochs", t.pretrain.epochs}};
  const auto& b = cfg.bench;
  j["bench"] = {{"checkpoint", b.checkpoint}, {"trials", b.trials}, {"batch_size", b.batch_size},
                {"warmup", b.warmup}};
  const auto& dm = cfg.demo;
  j["demo"] = {{"kind", dm.kind}, {"dim", dm.dim}, {"seed", dm.seed}, {"tol", dm.tol}, {"max_iter", dm.max_iter}};
  return j;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json cfg = default_config_json();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json file = json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
    merge_config(cfg, file);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return config_from_json(cfg);
}

}  // namespace deq
