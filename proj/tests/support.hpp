#pragma once

#include <cstdint>
#include <random>

#include "deq/backward.hpp"
#include "deq/cell.hpp"
#include "deq/fixed_point.hpp"

namespace deq::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

inline Vector random_vector(Eigen::Index dim, std::mt19937_64& rng, double scale = 1.0) {
  return random_matrix(dim, 1, rng, scale);
}

/// Random cell whose W has spectral norm `gamma` (exactly, via SVD).
inline CellParams<double> random_cell(Eigen::Index d_z, Eigen::Index d_x, CellKind kind, std::mt19937_64& rng,
                                      double gamma = 0.9) {
  CellParams<double> p{random_matrix(d_z, d_z, rng), random_matrix(d_z, d_x, rng), random_vector(d_z, rng, 0.5),
                       kind};
  const double sigma = Eigen::JacobiSVD<Matrix>(p.W).singularValues()(0);
  p.W *= gamma / sigma;
  return p;
}

inline double sigma_max(const Matrix& m) { return Eigen::JacobiSVD<Matrix>(m).singularValues()(0); }

/// (I - J^T)^{-1} v via explicit Jacobian and a direct solve.
inline Vector dense_implicit_adjoint(const CellParams<double>& p, const Vector& x, const Vector& z_star,
                                     const Vector& v) {
  const Matrix J = cell_jacobian_state(p, z_star, x);
  const Matrix A = Matrix::Identity(J.rows(), J.cols()) - J.transpose();
  return A.fullPivLu().solve(v);
}

inline double rel_err(const Eigen::Ref<const Eigen::MatrixXd>& got, const Eigen::Ref<const Eigen::MatrixXd>& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-12);
}

/// Flattened (W, U, b) in the same order as ParamGrads::flatten.
inline Vector flatten_params(const CellParams<double>& p) {
  Vector out(p.W.size() + p.U.size() + p.b.size());
  out << p.W.reshaped(), p.U.reshaped(), p.b;
  return out;
}

inline CellParams<double> unflatten_params(const Vector& theta, const CellParams<double>& like) {
  CellParams<double> p = like;
  Eigen::Index k = 0;
  p.W = theta.segment(k, like.W.size()).reshaped(like.W.rows(), like.W.cols());
  k += like.W.size();
  p.U = theta.segment(k, like.U.size()).reshaped(like.U.rows(), like.U.cols());
  k += like.U.size();
  p.b = theta.segment(k, like.b.size());
  return p;
}

}  // namespace deq::testing
