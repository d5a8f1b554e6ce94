#pragma once

#include <string>
#include <string_view>
#include <limits>
#include <type_traits>
#include <variant>

#include "deq/cell.hpp"
#include "deq/fixed_point.hpp"

namespace deq {

enum class Strategy { Implicit, JFB, NPG, GDEQ };

inline constexpr Strategy kAllStrategies[] = {Strategy::Implicit, Strategy::JFB, Strategy::NPG,
                                              Strategy::GDEQ};

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Implicit: return "implicit";
    case Strategy::JFB: return "jfb";
    case Strategy::NPG: return "npg";
    case Strategy::GDEQ: return "gdeq";
  }
  return "unknown";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

/// Fixed-point iteration on (I - J^T) u = v, one VJP per iteration.
struct ImplicitConfig {
  int max_iter = 20;
  double tol = 1e-6;
};
struct JfbConfig {};
/// Truncated Neumann series with k terms and dampening lambda.
struct NpgConfig {
  int k = 5;
  double lambda = 0.5;
};
/// Re-use of the forward solve's inverse-Jacobian approximation.
struct GdeqConfig {};

using StrategyConfig = std::variant<ImplicitConfig, JfbConfig, NpgConfig, GdeqConfig>;

inline Strategy strategy_of(const StrategyConfig& cfg) {
  return static_cast<Strategy>(cfg.index());
}

inline void validate(const StrategyConfig& cfg) {
  if (const auto* c = std::get_if<ImplicitConfig>(&cfg)) {
    detail::require(c->max_iter >= 1, "ImplicitConfig: max_iter must be >= 1");
    detail::require(c->tol > 0, "ImplicitConfig: tol must be positive");
  } else if (const auto* n = std::get_if<NpgConfig>(&cfg)) {
    detail::require(n->k >= 1, "NpgConfig: k must be >= 1");
    detail::require(n->lambda >= 0 && n->lambda <= 1, "NpgConfig: lambda must lie in [0, 1]");
  }
}

/// u approximates A^T v with A = (I - df/dz*)^{-1}.
template <typename Scalar>
struct AdjointVector {
  Vec<Scalar> u;
  int vjp_count = 0;
  bool converged = true;  // meaningful for Implicit only
  Strategy strategy = Strategy::JFB;
};

template <typename Scalar>
AdjointVector<Scalar> adjoint_implicit(const CellParams<Scalar>& p, const Vec<Scalar>& x,
                                       const Vec<Scalar>& z_star, const Vec<Scalar>& v,
                                       const ImplicitConfig& cfg) {
  validate(StrategyConfig{cfg});
  detail::require_dim(v.size(), p.state_dim(), "adjoint_implicit: v");
  AdjointVector<Scalar> adj{v, 0, false, Strategy::Implicit};

  Vec<Scalar> best = v;
  Scalar best_res = std::numeric_limits<Scalar>::infinity();
  Vec<Scalar> u = v;
  bool monotone = true;
  for (int it = 0; it < cfg.max_iter; ++it) {
    Vec<Scalar> next = v + cell_vjp_state(p, z_star, x, u);
    ++adj.vjp_count;
    const Scalar res = (next - u).norm();
    if (!(res < best_res)) monotone = false;
    if (res < best_res) {
      best_res = res;
      best = u;
    }
    u = std::move(next);
    if (res <= Scalar(cfg.tol)) {
      adj.converged = true;
      break;
    }
  }
  if (!u.allFinite()) u = best;
  adj.u = (adj.converged || monotone) ? std::move(u) : std::move(best);
  return adj;
}

template <typename Scalar>
AdjointVector<Scalar> adjoint_jfb(const Vec<Scalar>& v) {
  return {v, 0, true, Strategy::JFB};
}

/// u = lambda * sum_{i<k} (M^T)^i v with M^T w = lambda J^T w + (1 - lambda) w.
template <typename Scalar>
AdjointVector<Scalar> adjoint_npg(const CellParams<Scalar>& p, const Vec<Scalar>& x,
                                  const Vec<Scalar>& z_star, const Vec<Scalar>& v,
                                  const NpgConfig& cfg) {
  validate(StrategyConfig{cfg});
  detail::require_dim(v.size(), p.state_dim(), "adjoint_npg: v");
  const Scalar lambda = static_cast<Scalar>(cfg.lambda);
  AdjointVector<Scalar> adj{Vec<Scalar>(), 0, true, Strategy::NPG};
  Vec<Scalar> sum = v;
  Vec<Scalar> term = v;
  for (int i = 1; i < cfg.k; ++i) {
    term = lambda * cell_vjp_state(p, z_star, x, term) + (Scalar(1) - lambda) * term;
    ++adj.vjp_count;
    sum += term;
  }
  adj.u = lambda * sum;
  return adj;
}

/// u = -(B_T^{-1})^T v. One low-rank application, no cell evaluations.
template <typename Scalar>
AdjointVector<Scalar> adjoint_gdeq(const LimitedMemoryInverse<Scalar>& B, const Vec<Scalar>& v) {
  return {-B.apply_transpose(v), 0, true, Strategy::GDEQ};
}

template <typename Scalar>
struct CellGradients {
  ParamGrads<Scalar> params;
  Vec<Scalar> input;
};

template <typename Scalar>
CellGradients<Scalar> grads_from_adjoint(const CellParams<Scalar>& p, const Vec<Scalar>& x,
                                         const Vec<Scalar>& z_star, const AdjointVector<Scalar>& adj) {
  return {cell_vjp_params(p, z_star, x, adj.u), cell_vjp_input(p, z_star, x, adj.u)};
}

template <typename Scalar>
AdjointVector<Scalar> strategy_dispatch(const StrategyConfig& cfg, const CellParams<Scalar>& p,
                                        const Vec<Scalar>& x, const FixedPointSolution<Scalar>& sol,
                                        const Vec<Scalar>& v) {
  return std::visit(
      [&](const auto& c) -> AdjointVector<Scalar> {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, ImplicitConfig>) {
          return adjoint_implicit(p, x, sol.z_star, v, c);
        } else if constexpr (std::is_same_v<C, JfbConfig>) {
          detail::require_dim(v.size(), p.state_dim(), "adjoint_jfb: v");
          return adjoint_jfb(v);
        } else if constexpr (std::is_same_v<C, NpgConfig>) {
          return adjoint_npg(p, x, sol.z_star, v, c);
        } else {
          if (sol.solver != SolverKind::Broyden) {
            throw ConfigError("gdeq strategy requires a Broyden forward solve (got picard)");
          }
          return adjoint_gdeq(sol.inv_jacobian, v);
        }
      },
      cfg);
}

}  // namespace deq
