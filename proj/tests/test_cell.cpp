#include <doctest.h>

#include <random>

#include "deq/cell.hpp"
#include "support.hpp"

using namespace deq;
using namespace deq::testing;

namespace {

CellParams<double> scalar_linear(double w, double u, double b) {
  auto p = CellParams<double>::zeros(1, 1, CellKind::Linear);
  p.W(0, 0) = w;
  p.U(0, 0) = u;
  p.b(0) = b;
  return p;
}

Vector scalar(double v) { return Vector::Constant(1, v); }

}  // namespace

TEST_CASE("cell_forward examples") {
  auto constant = CellParams<double>::zeros(2, 2, CellKind::Linear);
  constant.U.setIdentity();
  const Vector x = (Vector(2) << 1, 2).finished();
  std::mt19937_64 rng(1);
  CHECK(cell_forward(constant, random_vector(2, rng), x) == x);

  const auto zero_tanh = CellParams<double>::zeros(3, 2, CellKind::Tanh);
  CHECK(cell_forward(zero_tanh, random_vector(3, rng), random_vector(2, rng)) == Vector::Zero(3));

  CHECK(cell_forward(scalar_linear(0.5, 1, 0), scalar(3), scalar(1))(0) == doctest::Approx(2.5));
}

TEST_CASE("cell shape mismatches are rejected") {
  const auto p = CellParams<double>::zeros(3, 2, CellKind::Tanh);
  CHECK_THROWS_AS(cell_forward(p, Vector::Zero(2), Vector::Zero(2)), InvalidInput);
  CHECK_THROWS_AS(cell_forward(p, Vector::Zero(3), Vector::Zero(3)), InvalidInput);
  CHECK_THROWS_AS(cell_vjp_state(p, Vector::Zero(3), Vector::Zero(2), Vector::Zero(2)), InvalidInput);
  CHECK_THROWS_AS(cell_vjp_params(p, Vector::Zero(3), Vector::Zero(2), Vector::Zero(4)), InvalidInput);
  CHECK_THROWS_AS(cell_vjp_input(p, Vector::Zero(3), Vector::Zero(2), Vector::Zero(1)), InvalidInput);
}

TEST_CASE("cell_jacobian_state") {
  std::mt19937_64 rng(7);
  const auto lin = random_cell(4, 3, CellKind::Linear, rng);
  CHECK(cell_jacobian_state(lin, random_vector(4, rng), random_vector(3, rng)) == lin.W);

  // z chosen so that W z + U x + b = 0.
  auto th = random_cell(4, 3, CellKind::Tanh, rng);
  const Vector x = random_vector(3, rng);
  const Vector z = th.W.fullPivLu().solve(-(th.U * x + th.b));
  CHECK(approx_rel(cell_jacobian_state(th, z, x), th.W, 1e-12));

  SUBCASE("matches central finite differences") {
    const Vector z0 = random_vector(4, rng);
    const Matrix J = cell_jacobian_state(th, z0, x);
    for (Eigen::Index i = 0; i < 4; ++i) {
      const auto fi = [&](const Vector& z) { return cell_forward(th, z, x)(i); };
      const Vector row = numeric_grad_oracle<double>(fi, z0, 1e-5);
      CHECK(rel_err(J.row(i).transpose(), row) <= 1e-6);
    }
  }
}

TEST_CASE("cell_vjp_state") {
  std::mt19937_64 rng(8);
  auto lin = CellParams<double>::zeros(3, 2, CellKind::Linear);
  lin.W.setIdentity();
  const Vector v = random_vector(3, rng);
  CHECK(cell_vjp_state(lin, random_vector(3, rng), random_vector(2, rng), v) == v);

  const auto zero_w = CellParams<double>{Matrix::Zero(3, 3), random_matrix(3, 2, rng), random_vector(3, rng),
                                         CellKind::Tanh};
  CHECK(cell_vjp_state(zero_w, random_vector(3, rng), random_vector(2, rng), v) == Vector::Zero(3));

  const auto before = vjp_count_total();
  cell_vjp_state(lin, v, Vector::Zero(2), v);
  CHECK(vjp_count_total() - before == 1);
}

TEST_CASE("property: VJP equals J^T v for both kinds") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index dz = 1 + trial % 8, dx = 1 + trial % 3;
    const auto p = random_cell(dz, dx, trial % 2 ? CellKind::Tanh : CellKind::Linear, rng);
    const Vector z = random_vector(dz, rng), x = random_vector(dx, rng), v = random_vector(dz, rng);
    CHECK(approx_rel(cell_vjp_state(p, z, x, v), cell_jacobian_state(p, z, x).transpose() * v, 1e-12));
  }
}

TEST_CASE("cell_vjp_params examples") {
  const auto p = scalar_linear(0.5, 1, 0);
  const auto g = cell_vjp_params(p, scalar(2), scalar(1), scalar(3));
  CHECK(g.gW(0, 0) == 6);
  CHECK(g.gU(0, 0) == 3);
  CHECK(g.gb(0) == 3);

  std::mt19937_64 rng(10);
  const auto th = random_cell(3, 2, CellKind::Tanh, rng);
  const auto z = ParamGrads<double>::zeros_like(th);
  const auto g0 = cell_vjp_params(th, random_vector(3, rng), random_vector(2, rng), Vector::Zero(3));
  CHECK(g0.flatten() == z.flatten());
}

TEST_CASE("property: parameter and input VJPs match finite differences of u^T f") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto p = random_cell(3, 2, seed % 5 == 0 ? CellKind::Linear : CellKind::Tanh, rng);
    const Vector z = random_vector(3, rng), x = random_vector(2, rng), u = random_vector(3, rng);

    const auto theta_loss = [&](const Vector& theta) { return u.dot(cell_forward(unflatten_params(theta, p), z, x)); };
    const Vector fd_theta = numeric_grad_oracle<double>(theta_loss, flatten_params(p), 1e-5);
    CHECK(rel_err(cell_vjp_params(p, z, x, u).flatten(), fd_theta) <= 1e-5);

    const auto x_loss = [&](const Vector& xx) { return u.dot(cell_forward(p, z, xx)); };
    CHECK(rel_err(cell_vjp_input(p, z, x, u), numeric_grad_oracle<double>(x_loss, x, 1e-5)) <= 1e-5);
  }
}

TEST_CASE("cell_vjp_input examples") {
  std::mt19937_64 rng(12);
  auto p = random_cell(3, 3, CellKind::Tanh, rng);
  p.U.setZero();
  const Vector u = random_vector(3, rng);
  CHECK(cell_vjp_input(p, random_vector(3, rng), random_vector(3, rng), u) == Vector::Zero(3));

  auto lin = random_cell(3, 3, CellKind::Linear, rng);
  lin.U.setIdentity();
  CHECK(cell_vjp_input(lin, random_vector(3, rng), random_vector(3, rng), u) == u);
}

TEST_CASE("spectral_rescale") {
  std::mt19937_64 rng(13);
  auto p = random_cell(6, 2, CellKind::Tanh, rng, 2.0);
  REQUIRE(sigma_max(p.W) == doctest::Approx(2.0));
  const auto scaled = spectral_rescale(p, 0.9);
  CHECK(std::abs(sigma_max(scaled.W) - 0.9) <= 1e-3);
  CHECK(spectral_norm_estimate(scaled.W) <= 0.9 + 1e-6);
  CHECK(scaled.U == p.U);
  CHECK(scaled.b == p.b);

  auto small = random_cell(6, 2, CellKind::Tanh, rng, 0.5);
  CHECK(spectral_rescale(small, 0.9).W == small.W);

  auto zero = CellParams<double>::zeros(4, 2, CellKind::Tanh);
  CHECK(spectral_rescale(zero, 0.9).W == zero.W);

  CHECK_THROWS_AS(spectral_rescale(zero, 1.0), InvalidInput);
  CHECK_THROWS_AS(spectral_rescale(zero, 0.0), InvalidInput);
}

TEST_CASE("property: rescaled tanh cells are contractions") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    CellParams<double> p{random_matrix(8, 8, rng, 2.0), random_matrix(8, 3, rng), random_vector(8, rng),
                         CellKind::Tanh};
    p = spectral_rescale(p, 0.9);
    const Vector x = random_vector(3, rng);
    for (int k = 0; k < 5; ++k) {
      const Vector z1 = random_vector(8, rng, 3.0), z2 = random_vector(8, rng, 3.0);
      CHECK((cell_forward(p, z1, x) - cell_forward(p, z2, x)).norm() <= 0.9001 * (z1 - z2).norm());
    }
  }
}

TEST_CASE("numeric_grad_oracle") {
  const Vector p = (Vector(2) << 1, 2).finished();
  const Vector g = numeric_grad_oracle<double>([](const Vector& q) { return q.squaredNorm(); }, p, 1e-5);
  CHECK(std::abs(g(0) - 2) <= 1e-8);
  CHECK(std::abs(g(1) - 4) <= 1e-8);

  CHECK(numeric_grad_oracle<double>([](const Vector&) { return 3.0; }, p, 1e-5) == Vector::Zero(2));
  CHECK(numeric_grad_oracle<double>([](const Vector& q) { return std::sin(q(0)); }, Vector::Zero(1), 1e-5)(0) ==
        doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_AS(numeric_grad_oracle<double>([](const Vector& q) { return std::log(q(0)); }, Vector::Zero(1), 1e-5),
                  OracleError);
  CHECK_THROWS_AS(numeric_grad_oracle<double>([](const Vector&) { return 0.0; }, p, 0.0), InvalidInput);
}
