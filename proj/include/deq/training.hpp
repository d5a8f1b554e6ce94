#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "deq/backward.hpp"
#include "deq/cell.hpp"
#include "deq/dataset.hpp"
#include "deq/fixed_point.hpp"

namespace deq {

/// Linear post-processing layer: logits = R z* + c.
struct ReadoutParams {
  Matrix R;  // q x d_z
  Vector c;  // q
};

struct DeqModel {
  CellParams<double> cell;
  ReadoutParams readout;
};

struct ModelConfig {
  int d_z = 32;
  CellKind kind = CellKind::Tanh;
  double init_gamma = 0.9;    // spectral bound on W at initialization
  double input_scale = 4.0;   // std of U entries
  double readout_scale = 0.1; // std of R entries
};

/// Random W (spectrally rescaled), U, R; zero biases. Deterministic per seed.
DeqModel init_model(Eigen::Index d_x, int num_classes, const ModelConfig& cfg, std::uint64_t seed);

struct PretrainConfig {
  bool enabled = false;
  int unroll_depth = 8;
  int epochs = 10;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  StrategyConfig strategy = GdeqConfig{};
  SolverConfig solver;
  PretrainConfig pretrain;
  int fidelity_every = 50;  // steps between gradient-fidelity probes, 0 = off
  double grad_clip = 1.0;   // max global gradient 2-norm per step, 0 = off
  /// Strategy configs probed against Implicit. Implicit settings of the probe
  /// reference come from the ImplicitConfig entry here.
  std::vector<StrategyConfig> probe_strategies = {ImplicitConfig{}, JfbConfig{}, NpgConfig{}, GdeqConfig{}};

  void validate() const;
};

struct Prediction {
  Vector logits;
  FixedPointSolution<double> sol;
};

Prediction forward_predict(const CellParams<double>& p, const ReadoutParams& r, const Vector& x,
                           const SolverConfig& solver);

struct LossAndGrad {
  double loss;
  Vector dlogits;
};

/// Max-subtracted softmax cross-entropy and its gradient w.r.t. the logits.
LossAndGrad softmax_xent(const Vector& logits, int label);

/// Index of the largest logit, ties toward the lower index.
int argmax(const Vector& logits);

struct ModelGrads {
  ParamGrads<double> cell;
  Matrix gR;
  Vector gc;

  static ModelGrads zeros_like(const DeqModel& m);
  ModelGrads& operator+=(const ModelGrads& o);
  ModelGrads& operator*=(double s);
  double norm() const;
};

/// Rescales g to 2-norm max_norm when larger. No-op for max_norm <= 0.
void clip_by_norm(ModelGrads& g, double max_norm);

/// SGD with heavy-ball momentum: vel = momentum * vel + grad; param -= lr * vel.
class MomentumSgd {
 public:
  MomentumSgd(const DeqModel& model, double learning_rate, double momentum);
  void apply(DeqModel& model, const ModelGrads& grads);

 private:
  double lr_;
  double momentum_;
  ModelGrads velocity_;
};

struct StepMetrics {
  double loss_sum = 0;
  int correct = 0;
  int samples = 0;          // samples that contributed to the update
  int diverged = 0;
  int fwd_converged = 0;
  long fwd_iterations = 0;
  long bwd_vjps = 0;
  int bwd_unconverged = 0;  // Implicit adjoints that hit their budget
  double backward_seconds = 0;
};

/// Forward, strategy adjoint and averaged gradient for one batch, then one
/// optimizer update. Diverged samples are dropped from the average.
/// Throws TrainingDivergence when every sample diverged.
StepMetrics train_step(DeqModel& model, MomentumSgd& opt, const Dataset& data,
                       std::span<const std::size_t> batch, const TrainConfig& cfg);

/// Batch-mean gradient under one strategy, no update. Samples listed in
/// `skip` (forward diverged) are excluded.
struct BatchGradient {
  ModelGrads grads;
  StepMetrics metrics;
};
BatchGradient batch_gradient(const DeqModel& model, const Dataset& data, std::span<const std::size_t> batch,
                             const SolverConfig& solver, const StrategyConfig& strategy);

/// Exact backprop through the depth-D weight-tied unrolling z_{t+1} = f(z_t, x), z_0 = 0.
struct UnrolledResult {
  double loss;
  Vector z_final;
  Vector logits;
  ModelGrads grads;
};
UnrolledResult unrolled_loss_and_grad(const DeqModel& model, const Vector& x, int label, int depth);

/// Trains the unrolled network for cfg.pretrain.epochs with the same loss and optimizer.
void pretrain_unrolled(DeqModel& model, const Dataset& data, const TrainConfig& cfg);

struct ProbeRow {
  long step;
  Strategy strategy;
  double cosine;  // NaN when undefined
  int dot_sign;   // -1, 0, +1 (0 when undefined)
};

/// Cosine similarity of each strategy's cell-parameter gradient (W, U, b) with
/// the Implicit one, on samples whose forward converged. Parameters are not
/// modified.
std::vector<ProbeRow> gradient_fidelity_probe(const DeqModel& model, const Dataset& data,
                                              std::span<const std::size_t> batch, const SolverConfig& solver,
                                              std::span<const StrategyConfig> strategies, long step);

double cosine_similarity(const Vector& a, const Vector& b);

struct EvalResult {
  double accuracy;
  double mean_iterations;
  double converged_rate;
};

/// Diverged samples count as misclassified.
EvalResult evaluate(const DeqModel& model, const Dataset& data, const SolverConfig& solver);

struct EpochRow {
  int epoch;
  double wall_s;
  double train_loss;
  double train_acc;
  double test_acc;
  double fwd_iters_mean;
  double bwd_vjps_mean;
  double fwd_conv_rate;
};

struct RunRecord {
  std::vector<EpochRow> epochs;
  std::vector<ProbeRow> probes;
  double pretrain_seconds = 0;
  double total_seconds = 0;
  long total_fwd_iterations = 0;
  long total_bwd_vjps = 0;
  long diverged_samples = 0;
  long steps = 0;
};

struct RunCallbacks {
  std::function<void(const EpochRow&)> on_epoch;
  std::function<void(const std::vector<ProbeRow>&)> on_probe;
};

/// Full run: optional pretraining, then cfg.epochs of DEQ training with test
/// evaluation every epoch. Throws TrainingDivergence when every step of an
/// epoch diverged; rows emitted so far have already gone through callbacks.
RunRecord run_training(DeqModel& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                       const RunCallbacks& callbacks = {});

}  // namespace deq
