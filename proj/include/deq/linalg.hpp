#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <string>

#include <Eigen/Dense>

#include "deq/errors.hpp"

namespace deq {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = Vec<double>;
using Matrix = Mat<double>;

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw InvalidInput(what);
}

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want) {
    throw InvalidInput(std::string(what) + ": expected dimension " + std::to_string(want) +
                       ", got " + std::to_string(got));
  }
}

}  // namespace detail

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Inverse-Jacobian approximation stored as -I plus at most `capacity` rank-one
/// terms u_i v_i^T. Pushing past capacity evicts the oldest pair.
template <typename Scalar>
class LimitedMemoryInverse {
 public:
  struct Pair {
    Vec<Scalar> u;
    Vec<Scalar> v;
  };

  static constexpr std::size_t kDefaultCapacity = 32;

  explicit LimitedMemoryInverse(Eigen::Index dim, std::size_t capacity = kDefaultCapacity)
      : dim_(dim), capacity_(capacity) {
    detail::require(dim > 0, "LimitedMemoryInverse: dim must be positive");
    detail::require(capacity > 0, "LimitedMemoryInverse: capacity must be positive");
  }

  Eigen::Index dim() const noexcept { return dim_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return pairs_.size(); }
  bool empty() const noexcept { return pairs_.empty(); }
  const std::deque<Pair>& pairs() const noexcept { return pairs_; }

  template <typename DU, typename DV>
  void push(const Eigen::MatrixBase<DU>& u, const Eigen::MatrixBase<DV>& v) {
    detail::require_dim(u.size(), dim_, "lm_push(u)");
    detail::require_dim(v.size(), dim_, "lm_push(v)");
    detail::require(u.allFinite() && v.allFinite(), "lm_push: non-finite update pair");
    if (pairs_.size() == capacity_) pairs_.pop_front();
    pairs_.push_back(Pair{u, v});
  }

  /// (-I + sum u_i v_i^T) w
  template <typename Derived>
  Vec<Scalar> apply(const Eigen::MatrixBase<Derived>& w) const {
    detail::require_dim(w.size(), dim_, "lm_apply");
    Vec<Scalar> out = -w;
    for (const auto& p : pairs_) out.noalias() += p.u * p.v.dot(w);
    return out;
  }

  /// (-I + sum v_i u_i^T) w
  template <typename Derived>
  Vec<Scalar> apply_transpose(const Eigen::MatrixBase<Derived>& w) const {
    detail::require_dim(w.size(), dim_, "lm_apply_transpose");
    Vec<Scalar> out = -w;
    for (const auto& p : pairs_) out.noalias() += p.v * p.u.dot(w);
    return out;
  }

  /// Dense dim x dim form. Test oracles only.
  Mat<Scalar> dense() const {
    Mat<Scalar> m = -Mat<Scalar>::Identity(dim_, dim_);
    for (const auto& p : pairs_) m.noalias() += p.u * p.v.transpose();
    return m;
  }

 private:
  Eigen::Index dim_;
  std::size_t capacity_;
  std::deque<Pair> pairs_;
};

template <typename Scalar, typename Derived>
Vec<Scalar> lm_apply(const LimitedMemoryInverse<Scalar>& op, const Eigen::MatrixBase<Derived>& w) {
  return op.apply(w);
}

template <typename Scalar, typename Derived>
Vec<Scalar> lm_apply_transpose(const LimitedMemoryInverse<Scalar>& op,
                               const Eigen::MatrixBase<Derived>& w) {
  return op.apply_transpose(w);
}

template <typename Scalar, typename DU, typename DV>
void lm_push(LimitedMemoryInverse<Scalar>& op, const Eigen::MatrixBase<DU>& u,
             const Eigen::MatrixBase<DV>& v) {
  op.push(u, v);
}

/// |a - b| <= tol * max(|a|, |b|, 1e-12), elementwise on the norm of the difference.
template <typename DA, typename DB>
bool approx_rel(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, double tol) {
  const double scale = std::max({static_cast<double>(a.norm()), static_cast<double>(b.norm()), 1e-12});
  return static_cast<double>((a - b).norm()) <= tol * scale;
}

inline bool approx_rel(double a, double b, double tol) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) <= tol * scale;
}

}  // namespace deq
