#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>

#include "deq/linalg.hpp"

namespace deq {

enum class CellKind { Tanh, Linear };

/// Weight-tied layer f(z, x) = act(W z + U x + b).
template <typename Scalar>
struct CellParams {
  Mat<Scalar> W;  // d_z x d_z
  Mat<Scalar> U;  // d_z x d_x
  Vec<Scalar> b;  // d_z
  CellKind kind = CellKind::Tanh;

  Eigen::Index state_dim() const { return W.rows(); }
  Eigen::Index input_dim() const { return U.cols(); }

  static CellParams zeros(Eigen::Index d_z, Eigen::Index d_x, CellKind kind) {
    return {Mat<Scalar>::Zero(d_z, d_z), Mat<Scalar>::Zero(d_z, d_x), Vec<Scalar>::Zero(d_z), kind};
  }
};

template <typename Scalar>
struct ParamGrads {
  Mat<Scalar> gW;
  Mat<Scalar> gU;
  Vec<Scalar> gb;

  static ParamGrads zeros_like(const CellParams<Scalar>& p) {
    return {Mat<Scalar>::Zero(p.W.rows(), p.W.cols()), Mat<Scalar>::Zero(p.U.rows(), p.U.cols()),
            Vec<Scalar>::Zero(p.b.size())};
  }

  ParamGrads& operator+=(const ParamGrads& o) {
    gW += o.gW;
    gU += o.gU;
    gb += o.gb;
    return *this;
  }

  ParamGrads& operator*=(Scalar s) {
    gW *= s;
    gU *= s;
    gb *= s;
    return *this;
  }

  /// (gW, gU, gb) flattened column-major in that order.
  Vec<Scalar> flatten() const {
    Vec<Scalar> out(gW.size() + gU.size() + gb.size());
    out << gW.reshaped(), gU.reshaped(), gb;
    return out;
  }
};

// Counts every state VJP (J^T v) evaluated anywhere in the process.
inline std::atomic<std::uint64_t>& vjp_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline std::uint64_t vjp_count_total() { return vjp_counter().load(std::memory_order_relaxed); }

namespace detail {

template <typename Scalar, typename DZ, typename DX>
void check_cell_shapes(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                       const Eigen::MatrixBase<DX>& x) {
  require(p.W.rows() == p.W.cols(), "CellParams: W must be square");
  require_dim(p.U.rows(), p.W.rows(), "CellParams: U rows");
  require_dim(p.b.size(), p.W.rows(), "CellParams: b");
  require_dim(z.size(), p.W.rows(), "cell: z");
  require_dim(x.size(), p.U.cols(), "cell: x");
}

template <typename Scalar, typename DZ, typename DX>
Vec<Scalar> preactivation(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                          const Eigen::MatrixBase<DX>& x) {
  Vec<Scalar> a = p.b;
  a.noalias() += p.W * z;
  a.noalias() += p.U * x;
  return a;
}

// d = f'(preactivation), as a function of the output f.
template <typename Scalar>
Vec<Scalar> activation_slope(CellKind kind, const Vec<Scalar>& f) {
  if (kind == CellKind::Linear) return Vec<Scalar>::Ones(f.size());
  return Vec<Scalar>::Ones(f.size()) - f.cwiseAbs2();
}

}  // namespace detail

template <typename Scalar, typename DZ, typename DX>
Vec<Scalar> cell_forward(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                         const Eigen::MatrixBase<DX>& x) {
  detail::check_cell_shapes(p, z, x);
  Vec<Scalar> a = detail::preactivation(p, z, x);
  if (p.kind == CellKind::Tanh) a = a.array().tanh().matrix();
  return a;
}

/// J[i][j] = df_i/dz_j. Dense; meant for small dimensions.
template <typename Scalar, typename DZ, typename DX>
Mat<Scalar> cell_jacobian_state(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                                const Eigen::MatrixBase<DX>& x) {
  const Vec<Scalar> f = cell_forward(p, z, x);
  return detail::activation_slope(p.kind, f).asDiagonal() * p.W;
}

/// J^T v without forming J. Increments the global VJP counter by one.
template <typename Scalar, typename DZ, typename DX, typename DV>
Vec<Scalar> cell_vjp_state(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                           const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DV>& v) {
  detail::require_dim(v.size(), p.W.rows(), "cell_vjp_state: v");
  const Vec<Scalar> f = cell_forward(p, z, x);
  const Vec<Scalar> w = detail::activation_slope(p.kind, f).cwiseProduct(v);
  vjp_counter().fetch_add(1, std::memory_order_relaxed);
  return p.W.transpose() * w;
}

template <typename Scalar, typename DZ, typename DX, typename DU>
ParamGrads<Scalar> cell_vjp_params(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                                   const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DU>& u) {
  detail::require_dim(u.size(), p.W.rows(), "cell_vjp_params: u");
  const Vec<Scalar> f = cell_forward(p, z, x);
  Vec<Scalar> w = detail::activation_slope(p.kind, f).cwiseProduct(u);
  ParamGrads<Scalar> g;
  g.gW.noalias() = w * z.transpose();
  g.gU.noalias() = w * x.transpose();
  g.gb = std::move(w);
  return g;
}

template <typename Scalar, typename DZ, typename DX, typename DU>
Vec<Scalar> cell_vjp_input(const CellParams<Scalar>& p, const Eigen::MatrixBase<DZ>& z,
                           const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DU>& u) {
  detail::require_dim(u.size(), p.W.rows(), "cell_vjp_input: u");
  const Vec<Scalar> f = cell_forward(p, z, x);
  return p.U.transpose() * detail::activation_slope(p.kind, f).cwiseProduct(u);
}

/// Largest singular value by power iteration on W^T W.
template <typename Scalar>
Scalar spectral_norm_estimate(const Mat<Scalar>& W, int steps = 100) {
  if (W.size() == 0) return Scalar(0);
  Vec<Scalar> q(W.cols());
  for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = Scalar(1) + Scalar(i) / Scalar(q.size() + 1);
  q.normalize();
  Scalar sigma = 0;
  for (int k = 0; k < steps; ++k) {
    Vec<Scalar> y = W.transpose() * (W * q);
    const Scalar n = y.norm();
    if (n == Scalar(0)) return Scalar(0);
    q = y / n;
    sigma = (W * q).norm();
  }
  return sigma;
}

/// Scales W so its estimated spectral norm is at most gamma. U and b are untouched.
template <typename Scalar>
CellParams<Scalar> spectral_rescale(CellParams<Scalar> p, Scalar gamma) {
  detail::require(gamma > Scalar(0) && gamma < Scalar(1), "spectral_rescale: gamma must lie in (0, 1)");
  const Scalar sigma = spectral_norm_estimate(p.W);
  if (sigma > gamma) p.W *= gamma / sigma;
  return p;
}

/// Central differences of a scalar function, one coordinate at a time.
template <typename Scalar>
Vec<Scalar> numeric_grad_oracle(const std::function<Scalar(const Vec<Scalar>&)>& h,
                                const Vec<Scalar>& point, Scalar step) {
  detail::require(step > Scalar(0), "numeric_grad_oracle: step must be positive");
  Vec<Scalar> grad(point.size());
  Vec<Scalar> probe = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    probe(i) = point(i) + step;
    const Scalar hp = h(probe);
    probe(i) = point(i) - step;
    const Scalar hm = h(probe);
    probe(i) = point(i);
    if (!std::isfinite(hp) || !std::isfinite(hm)) {
      throw OracleError("numeric_grad_oracle: non-finite function value at coordinate " +
                        std::to_string(i));
    }
    grad(i) = (hp - hm) / (Scalar(2) * step);
  }
  return grad;
}

}  // namespace deq
