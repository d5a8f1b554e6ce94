#include "deq/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

namespace deq {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  // Row-major fill order so the draw sequence does not depend on storage order.
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

}  // namespace

void TrainConfig::validate() const {
  detail::require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  detail::require(learning_rate >= 0, "TrainConfig: learning_rate must be non-negative");
  detail::require(momentum >= 0 && momentum < 1, "TrainConfig: momentum must lie in [0, 1)");
  detail::require(grad_clip >= 0, "TrainConfig: grad_clip must be non-negative");
  detail::require(fidelity_every >= 0, "TrainConfig: fidelity_every must be >= 0");
  detail::require(pretrain.unroll_depth >= 1, "TrainConfig: pretrain.unroll_depth must be >= 1");
  detail::require(pretrain.epochs >= 1, "TrainConfig: pretrain.epochs must be >= 1");
  deq::validate(strategy);
  for (const auto& s : probe_strategies) deq::validate(s);
  solver.validate();
}

DeqModel init_model(Eigen::Index d_x, int num_classes, const ModelConfig& cfg, std::uint64_t seed) {
  detail::require(d_x > 0 && cfg.d_z > 0 && num_classes > 0, "init_model: dimensions must be positive");
  std::mt19937_64 rng(seed);
  const Eigen::Index d_z = cfg.d_z;
  DeqModel m;
  m.cell.kind = cfg.kind;
  m.cell.W = gaussian_matrix(d_z, d_z, 1.0 / std::sqrt(static_cast<double>(d_z)), rng);
  m.cell.U = gaussian_matrix(d_z, d_x, cfg.input_scale, rng);
  m.cell.b = gaussian_matrix(d_z, 1, 1.0, rng);
  m.cell = spectral_rescale(std::move(m.cell), cfg.init_gamma);
  m.readout.R = gaussian_matrix(num_classes, d_z, cfg.readout_scale, rng);
  m.readout.c = Vector::Zero(num_classes);
  return m;
}

Prediction forward_predict(const CellParams<double>& p, const ReadoutParams& r, const Vector& x,
                           const SolverConfig& solver) {
  detail::require_dim(r.R.cols(), p.state_dim(), "forward_predict: readout columns");
  detail::require_dim(r.c.size(), r.R.rows(), "forward_predict: readout bias");
  Vector z0 = initial_state<double>(p.state_dim(), solver);
  FixedPointSolution<double> sol = broyden_solve(p, x, z0, solver);
  Vector logits = r.c;
  logits.noalias() += r.R * sol.z_star;
  return {std::move(logits), std::move(sol)};
}

LossAndGrad softmax_xent(const Vector& logits, int label) {
  detail::require(label >= 0 && label < logits.size(), "softmax_xent: label out of range");
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  const double total = e.sum();
  LossAndGrad out;
  out.loss = -(logits(label) - mx - std::log(total));
  out.dlogits = e / total;
  out.dlogits(label) -= 1.0;
  return out;
}

int argmax(const Vector& logits) {
  int best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = static_cast<int>(i);
  }
  return best;
}

ModelGrads ModelGrads::zeros_like(const DeqModel& m) {
  return {ParamGrads<double>::zeros_like(m.cell), Matrix::Zero(m.readout.R.rows(), m.readout.R.cols()),
          Vector::Zero(m.readout.c.size())};
}

ModelGrads& ModelGrads::operator+=(const ModelGrads& o) {
  cell += o.cell;
  gR += o.gR;
  gc += o.gc;
  return *this;
}

ModelGrads& ModelGrads::operator*=(double s) {
  cell *= s;
  gR *= s;
  gc *= s;
  return *this;
}

double ModelGrads::norm() const {
  return std::sqrt(cell.gW.squaredNorm() + cell.gU.squaredNorm() + cell.gb.squaredNorm() + gR.squaredNorm() +
                   gc.squaredNorm());
}

void clip_by_norm(ModelGrads& g, double max_norm) {
  if (max_norm <= 0) return;
  const double n = g.norm();
  if (n > max_norm) g *= max_norm / n;
}

MomentumSgd::MomentumSgd(const DeqModel& model, double learning_rate, double momentum)
    : lr_(learning_rate), momentum_(momentum), velocity_(ModelGrads::zeros_like(model)) {}

void MomentumSgd::apply(DeqModel& model, const ModelGrads& grads) {
  velocity_ *= momentum_;
  velocity_ += grads;
  model.cell.W -= lr_ * velocity_.cell.gW;
  model.cell.U -= lr_ * velocity_.cell.gU;
  model.cell.b -= lr_ * velocity_.cell.gb;
  model.readout.R -= lr_ * velocity_.gR;
  model.readout.c -= lr_ * velocity_.gc;
}

BatchGradient batch_gradient(const DeqModel& model, const Dataset& data, std::span<const std::size_t> batch,
                             const SolverConfig& solver, const StrategyConfig& strategy) {
  BatchGradient out{ModelGrads::zeros_like(model), {}};
  for (std::size_t idx : batch) {
    const Vector& x = data.features.at(idx);
    const int label = data.labels.at(idx);
    std::optional<Prediction> maybe;
    try {
      maybe = forward_predict(model.cell, model.readout, x, solver);
    } catch (const DivergenceError&) {
      ++out.metrics.diverged;
      continue;
    }
    const Prediction& pred = *maybe;
    const LossAndGrad lg = softmax_xent(pred.logits, label);
    out.metrics.loss_sum += lg.loss;
    out.metrics.correct += argmax(pred.logits) == label ? 1 : 0;
    out.metrics.fwd_iterations += pred.sol.iterations;
    out.metrics.fwd_converged += pred.sol.converged ? 1 : 0;

    const Vector v = model.readout.R.transpose() * lg.dlogits;
    const auto t0 = Clock::now();
    const AdjointVector<double> adj = strategy_dispatch(strategy, model.cell, x, pred.sol, v);
    CellGradients<double> cg = grads_from_adjoint(model.cell, x, pred.sol.z_star, adj);
    out.metrics.backward_seconds += seconds_since(t0);
    out.metrics.bwd_vjps += adj.vjp_count;
    out.metrics.bwd_unconverged += adj.converged ? 0 : 1;

    out.grads.cell += cg.params;
    out.grads.gR.noalias() += lg.dlogits * pred.sol.z_star.transpose();
    out.grads.gc += lg.dlogits;
    ++out.metrics.samples;
  }
  if (out.metrics.samples > 0) out.grads *= 1.0 / out.metrics.samples;
  return out;
}

StepMetrics train_step(DeqModel& model, MomentumSgd& opt, const Dataset& data,
                       std::span<const std::size_t> batch, const TrainConfig& cfg) {
  detail::require(!batch.empty(), "train_step: empty batch");
  BatchGradient bg = batch_gradient(model, data, batch, cfg.solver, cfg.strategy);
  if (bg.metrics.samples == 0) {
    throw TrainingDivergence("train_step: all " + std::to_string(batch.size()) + " samples diverged");
  }
  clip_by_norm(bg.grads, cfg.grad_clip);
  opt.apply(model, bg.grads);
  return bg.metrics;
}

UnrolledResult unrolled_loss_and_grad(const DeqModel& model, const Vector& x, int label, int depth) {
  detail::require(depth >= 1, "unrolled_loss_and_grad: depth must be >= 1");
  const auto& p = model.cell;
  std::vector<Vector> zs;
  zs.reserve(static_cast<std::size_t>(depth) + 1);
  zs.push_back(Vector::Zero(p.state_dim()));
  for (int t = 0; t < depth; ++t) zs.push_back(cell_forward(p, zs.back(), x));

  UnrolledResult out;
  out.z_final = zs.back();
  out.logits = model.readout.c;
  out.logits.noalias() += model.readout.R * out.z_final;
  const LossAndGrad lg = softmax_xent(out.logits, label);
  out.loss = lg.loss;
  out.grads = ModelGrads::zeros_like(model);
  out.grads.gR.noalias() = lg.dlogits * out.z_final.transpose();
  out.grads.gc = lg.dlogits;

  Vector delta = model.readout.R.transpose() * lg.dlogits;  // dl/dz_{t+1}
  for (int t = depth - 1; t >= 0; --t) {
    const auto& z_t = zs[static_cast<std::size_t>(t)];
    out.grads.cell += cell_vjp_params(p, z_t, x, delta);
    if (t > 0) delta = cell_vjp_state(p, z_t, x, delta);
  }
  return out;
}

void pretrain_unrolled(DeqModel& model, const Dataset& data, const TrainConfig& cfg) {
  detail::require(cfg.pretrain.enabled, "pretrain_unrolled: pretraining is disabled");
  detail::require(data.size() > 0, "pretrain_unrolled: empty dataset");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  MomentumSgd opt(model, cfg.learning_rate, cfg.momentum);
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      ModelGrads acc = ModelGrads::zeros_like(model);
      for (std::size_t i = start; i < stop; ++i) {
        acc += unrolled_loss_and_grad(model, data.features[order[i]], data.labels[order[i]],
                                      cfg.pretrain.unroll_depth)
                   .grads;
      }
      acc *= 1.0 / static_cast<double>(stop - start);
      clip_by_norm(acc, cfg.grad_clip);
      opt.apply(model, acc);
    }
  }
}

double cosine_similarity(const Vector& a, const Vector& b) {
  const double aa = a.squaredNorm();
  const double bb = b.squaredNorm();
  if (aa == 0 || bb == 0 || !std::isfinite(aa) || !std::isfinite(bb)) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return a.dot(b) / std::sqrt(aa * bb);
}

std::vector<ProbeRow> gradient_fidelity_probe(const DeqModel& model, const Dataset& data,
                                              std::span<const std::size_t> batch, const SolverConfig& solver,
                                              std::span<const StrategyConfig> strategies, long step) {
  StrategyConfig reference = ImplicitConfig{};
  std::vector<StrategyConfig> order{reference};
  for (const auto& s : strategies) {
    if (strategy_of(s) == Strategy::Implicit) {
      order.front() = s;
    } else {
      order.push_back(s);
    }
  }

  struct Sample {
    const Vector* x;
    Vector v;
    FixedPointSolution<double> sol;
  };
  std::vector<Sample> samples;
  for (std::size_t idx : batch) {
    const Vector& x = data.features.at(idx);
    try {
      Prediction pred = forward_predict(model.cell, model.readout, x, solver);
      if (!pred.sol.converged) continue;
      Vector v = model.readout.R.transpose() * softmax_xent(pred.logits, data.labels.at(idx)).dlogits;
      samples.push_back({&x, std::move(v), std::move(pred.sol)});
    } catch (const DivergenceError&) {
    }
  }

  std::vector<Vector> flat;
  for (const auto& s : order) {
    ParamGrads<double> acc = ParamGrads<double>::zeros_like(model.cell);
    for (const auto& smp : samples) {
      const AdjointVector<double> adj = strategy_dispatch(s, model.cell, *smp.x, smp.sol, smp.v);
      acc += cell_vjp_params(model.cell, smp.sol.z_star, *smp.x, adj.u);
    }
    flat.push_back(acc.flatten());
  }

  std::vector<ProbeRow> rows;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const double cos = samples.empty() ? std::numeric_limits<double>::quiet_NaN()
                                       : cosine_similarity(flat[i], flat[0]);
    const int sign = std::isnan(cos) ? 0 : (cos > 0 ? 1 : (cos < 0 ? -1 : 0));
    rows.push_back({step, strategy_of(order[i]), cos, sign});
  }
  return rows;
}

EvalResult evaluate(const DeqModel& model, const Dataset& data, const SolverConfig& solver) {
  detail::require(data.size() > 0, "evaluate: empty dataset");
  long correct = 0;
  long iterations = 0;
  long converged = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      const Prediction pred = forward_predict(model.cell, model.readout, data.features[i], solver);
      correct += argmax(pred.logits) == data.labels[i] ? 1 : 0;
      iterations += pred.sol.iterations;
      converged += pred.sol.converged ? 1 : 0;
    } catch (const DivergenceError&) {
      iterations += solver.max_iter;
    }
  }
  const auto n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, static_cast<double>(iterations) / n,
          static_cast<double>(converged) / n};
}

RunRecord run_training(DeqModel& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                       const RunCallbacks& callbacks) {
  cfg.validate();
  detail::require(train.size() > 0 && test.size() > 0, "run_training: empty dataset");
  RunRecord record;
  const auto start = Clock::now();

  if (cfg.pretrain.enabled) {
    pretrain_unrolled(model, train, cfg);
    record.pretrain_seconds = seconds_since(start);
  }

  std::mt19937_64 rng(cfg.seed);
  MomentumSgd opt(model, cfg.learning_rate, cfg.momentum);
  std::vector<std::size_t> order(train.size());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    StepMetrics totals;
    int steps_in_epoch = 0;
    int failed_steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::span<const std::size_t> batch(order.data() + begin, std::min(bs, order.size() - begin));
      if (cfg.fidelity_every > 0 && record.steps % cfg.fidelity_every == 0) {
        auto rows = gradient_fidelity_probe(model, train, batch, cfg.solver, cfg.probe_strategies, record.steps);
        if (callbacks.on_probe) callbacks.on_probe(rows);
        record.probes.insert(record.probes.end(), rows.begin(), rows.end());
      }
      ++steps_in_epoch;
      ++record.steps;
      try {
        const StepMetrics m = train_step(model, opt, train, batch, cfg);
        totals.loss_sum += m.loss_sum;
        totals.correct += m.correct;
        totals.samples += m.samples;
        totals.diverged += m.diverged;
        totals.fwd_converged += m.fwd_converged;
        totals.fwd_iterations += m.fwd_iterations;
        totals.bwd_vjps += m.bwd_vjps;
      } catch (const TrainingDivergence&) {
        ++failed_steps;
        totals.diverged += static_cast<int>(batch.size());
      }
    }
    record.diverged_samples += totals.diverged;
    record.total_fwd_iterations += totals.fwd_iterations;
    record.total_bwd_vjps += totals.bwd_vjps;
    if (failed_steps == steps_in_epoch) {
      record.total_seconds = seconds_since(start);
      throw TrainingDivergence("epoch " + std::to_string(epoch) + ": every step diverged");
    }

    const EvalResult test_eval = evaluate(model, test, cfg.solver);
    const double used = std::max(1, totals.samples);
    const double attempted = std::max(1, totals.samples + totals.diverged);
    EpochRow row{epoch,
                 seconds_since(start),
                 totals.loss_sum / used,
                 totals.correct / used,
                 test_eval.accuracy,
                 static_cast<double>(totals.fwd_iterations) / used,
                 static_cast<double>(totals.bwd_vjps) / used,
                 totals.fwd_converged / attempted};
    if (!record.epochs.empty()) row.wall_s = std::max(row.wall_s, record.epochs.back().wall_s);
    record.epochs.push_back(row);
    if (callbacks.on_epoch) callbacks.on_epoch(row);
  }
  record.total_seconds = seconds_since(start);
  return record;
}

}  // namespace deq
