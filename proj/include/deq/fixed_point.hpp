#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "deq/cell.hpp"
#include "deq/linalg.hpp"

namespace deq {

struct SolverConfig {
  double tol = 1e-6;     // residual 2-norm threshold
  int max_iter = 18;     // forward iteration budget
  std::size_t memory = LimitedMemoryInverse<double>::kDefaultCapacity;
  double eps_den = 1e-10;  // relative Sherman-Morrison denominator floor
  bool random_init = false;
  std::uint64_t init_seed = 0;

  void validate() const {
    detail::require(tol > 0, "SolverConfig: tol must be positive");
    detail::require(max_iter >= 1, "SolverConfig: max_iter must be >= 1");
    detail::require(memory >= 1, "SolverConfig: memory must be >= 1");
    detail::require(eps_den > 0, "SolverConfig: eps_den must be positive");
  }
};

enum class SolverKind { Broyden, Picard };

template <typename Scalar>
struct FixedPointSolution {
  Vec<Scalar> z_star;
  Scalar residual_norm = 0;
  int iterations = 0;
  bool converged = false;
  LimitedMemoryInverse<Scalar> inv_jacobian;
  std::vector<Scalar> residual_trace;  // iterations + 1 entries
  SolverKind solver = SolverKind::Broyden;
  int skipped_updates = 0;
};

/// Zero state, or uniform(-0.5, 0.5) entries when cfg.random_init is set.
template <typename Scalar>
Vec<Scalar> initial_state(Eigen::Index dim, const SolverConfig& cfg) {
  if (!cfg.random_init) return Vec<Scalar>::Zero(dim);
  std::mt19937_64 rng(cfg.init_seed);
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  Vec<Scalar> z(dim);
  for (Eigen::Index i = 0; i < dim; ++i) z(i) = static_cast<Scalar>(dist(rng));
  return z;
}

/// g(z, x) = f(z, x) - z
template <typename Scalar, typename DZ, typename DX>
Vec<Scalar> residual(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                     const Eigen::MatrixBase<DX>& x) {
  return cell_forward(p, z, x) - z;
}

template <typename Scalar>
struct BroydenStep {
  Vec<Scalar> z_next;
  Vec<Scalar> g_next;
  bool skipped = false;  // rank-one update rejected for a degenerate denominator
};

/// One quasi-Newton step z_next = z - B^{-1} g followed by the Sherman-Morrison
/// update of B^{-1}, appended to `B` as a single (u, v) pair:
///   u = -B^{-1} g_next / den,  v = B^{-T} dz,  den = dz^T (dz + B^{-1} g_next).
template <typename Scalar>
BroydenStep<Scalar> broyden_step(const CellParams<Scalar>& p, const Vec<Scalar>& x,
                                 const Vec<Scalar>& z_t, const Vec<Scalar>& g_t,
                                 LimitedMemoryInverse<Scalar>& B, double eps_den = 1e-10) {
  BroydenStep<Scalar> out;
  out.z_next = z_t - B.apply(g_t);
  out.g_next = residual(p, out.z_next, x);
  if (!out.z_next.allFinite() || !out.g_next.allFinite()) {
    throw DivergenceError("broyden_step: non-finite iterate", {});
  }
  const Vec<Scalar> dz = out.z_next - z_t;
  const Vec<Scalar> Bg = B.apply(out.g_next);
  const Scalar den = dz.dot(dz + Bg);
  if (!(std::abs(den) >= Scalar(eps_den) * dz.squaredNorm()) || dz.squaredNorm() == Scalar(0)) {
    out.skipped = true;
    return out;
  }
  Vec<Scalar> v = B.apply_transpose(dz);
  Vec<Scalar> u = -Bg / den;
  if (!u.allFinite() || !v.allFinite()) {
    out.skipped = true;
    return out;
  }
  B.push(u, v);
  return out;
}

/// Passed to the optional per-step observer of broyden_solve.
template <typename Scalar>
struct BroydenTraceEvent {
  int iteration;  // 1-based index of the step just taken
  const Vec<Scalar>& z_prev;
  const Vec<Scalar>& g_prev;
  const BroydenStep<Scalar>& step;
  const LimitedMemoryInverse<Scalar>& B;  // state after the update
};

template <typename Scalar>
using BroydenObserver = std::function<void(const BroydenTraceEvent<Scalar>&)>;

/// Limited-memory Broyden root finding on g(z, x) = 0 starting from B^{-1} = -I.
/// Returns the lowest-residual iterate together with the final B^{-1}.
template <typename Scalar>
FixedPointSolution<Scalar> broyden_solve(const CellParams<Scalar>& p, const Vec<Scalar>& x,
                                         const Vec<Scalar>& z0, const SolverConfig& cfg,
                                         const BroydenObserver<Scalar>& observer = {}) {
  cfg.validate();
  FixedPointSolution<Scalar> sol{Vec<Scalar>(), 0, 0, false,
                                 LimitedMemoryInverse<Scalar>(p.state_dim(), cfg.memory), {},
                                 SolverKind::Broyden, 0};
  Vec<Scalar> z = z0;
  Vec<Scalar> g = residual(p, z, x);
  if (!g.allFinite()) throw DivergenceError("broyden_solve: non-finite initial residual", {});

  Scalar norm = g.norm();
  sol.residual_trace.push_back(norm);
  sol.z_star = z;
  sol.residual_norm = norm;

  while (norm > Scalar(cfg.tol) && sol.iterations < cfg.max_iter) {
    BroydenStep<Scalar> step;
    try {
      step = broyden_step(p, x, z, g, sol.inv_jacobian, cfg.eps_den);
    } catch (const DivergenceError& e) {
      std::vector<double> trace(sol.residual_trace.begin(), sol.residual_trace.end());
      trace.push_back(std::numeric_limits<double>::quiet_NaN());
      throw DivergenceError(std::string("broyden_solve: diverged at iteration ") +
                                std::to_string(sol.iterations + 1),
                            std::move(trace));
    }
    ++sol.iterations;
    if (step.skipped) ++sol.skipped_updates;
    if (observer) observer(BroydenTraceEvent<Scalar>{sol.iterations, z, g, step, sol.inv_jacobian});

    z = std::move(step.z_next);
    g = std::move(step.g_next);
    norm = g.norm();
    sol.residual_trace.push_back(norm);
    if (norm < sol.residual_norm) {
      sol.residual_norm = norm;
      sol.z_star = z;
    }
  }
  sol.converged = sol.residual_norm <= Scalar(cfg.tol);
  return sol;
}

/// Plain fixed-point iteration z <- f(z, x). Only meaningful for contractive cells.
template <typename Scalar>
FixedPointSolution<Scalar> picard_solve(const CellParams<Scalar>& p, const Vec<Scalar>& x,
                                        const Vec<Scalar>& z0, const SolverConfig& cfg) {
  cfg.validate();
  FixedPointSolution<Scalar> sol{Vec<Scalar>(), 0, 0, false,
                                 LimitedMemoryInverse<Scalar>(p.state_dim(), cfg.memory), {},
                                 SolverKind::Picard, 0};
  Vec<Scalar> z = z0;
  Vec<Scalar> g = residual(p, z, x);
  if (!g.allFinite()) throw DivergenceError("picard_solve: non-finite initial residual", {});

  Scalar norm = g.norm();
  sol.residual_trace.push_back(norm);
  sol.z_star = z;
  sol.residual_norm = norm;

  while (norm > Scalar(cfg.tol) && sol.iterations < cfg.max_iter) {
    z += g;  // z_{t+1} = f(z_t)
    g = residual(p, z, x);
    ++sol.iterations;
    if (!z.allFinite() || !g.allFinite()) {
      std::vector<double> trace(sol.residual_trace.begin(), sol.residual_trace.end());
      trace.push_back(std::numeric_limits<double>::quiet_NaN());
      throw DivergenceError("picard_solve: diverged at iteration " + std::to_string(sol.iterations),
                            std::move(trace));
    }
    norm = g.norm();
    sol.residual_trace.push_back(norm);
    if (norm < sol.residual_norm) {
      sol.residual_norm = norm;
      sol.z_star = z;
    }
  }
  sol.converged = sol.residual_norm <= Scalar(cfg.tol);
  return sol;
}

}  // namespace deq
