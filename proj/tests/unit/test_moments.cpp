#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace rpgcm;
using namespace testsupport;
using Catch::Approx;

namespace {

MomentSet random_moments(Urng& g, double* tau_out = nullptr, double* rho_out = nullptr) {
  int J = rint(g, 2, 4);
  VectorXd times = increasing_times(g, J);
  ModelSpec m = random_model(g, times);
  ItemLayout l = random_layout(g, times, 12);
  double tau = runif(g, 0.0, 2.0);
  double rho = runif(g, 0.0, 1.0);
  if (tau_out) *tau_out = tau;
  if (rho_out) *rho_out = rho;
  return assemble_moments(m, l, tau, rho);
}

}  // namespace

TEST_CASE("assemble_moments builds the block covariance structure", "[moments]") {
  VectorXd times(1);
  times << 0.0;
  VectorXd beta(1);
  beta << std::log(2.0);
  ModelSpec m = ModelSpec::unstructured(beta, times);
  ItemLayout l = ItemLayout::common(times, {1}, 1.0);
  MomentSet ms = assemble_moments(m, l, 1.0, 0.5);
  CHECK(ms.mu[0] == Approx(2.0));
  CHECK(ms.V(0, 0) == Approx(6.0));  // tau mu^2 + mu

  // pure Poisson: tau = 0 gives a diagonal covariance
  VectorXd t3(3);
  t3 << 0, 1, 2;
  ModelSpec line = ModelSpec::straight_line(0.4, 0.2);
  ItemLayout l3 = ItemLayout::common(t3, {2, 0, 3}, 1.5);
  MomentSet poisson = assemble_moments(line, l3, 0.0, 0.7);
  CHECK((poisson.V - MatrixXd(poisson.mu.asDiagonal())).cwiseAbs().maxCoeff() == 0.0);

  // rho = 0: all cross-block entries vanish
  MomentSet uncorr = assemble_moments(line, l3, 1.3, 0.0);
  CHECK(uncorr.V.block(0, 2, 2, 3).cwiseAbs().maxCoeff() == 0.0);

  // rows of D are mu_jk f(t_j)
  for (int k = 0; k < 2; ++k)
    CHECK(uncorr.D.row(k).isApprox(uncorr.mu[k] * gradient(line, 0.0).transpose()));

  CHECK_THROWS_AS(ItemLayout::common(t3, {0, 0, 0}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(assemble_moments(line, l3, 1.0, 1.2), std::invalid_argument);
  CHECK_THROWS_AS(assemble_moments(line, l3, -0.1, 0.5), std::invalid_argument);
}

TEST_CASE("closed-form inverse agrees with dense inversion", "[moments]") {
  Urng g(31);
  for (int rep = 0; rep < 150; ++rep) {
    double tau, rho;
    MomentSet ms = random_moments(g, &tau, &rho);
    MatrixXd inv = v_inverse_closed_form(ms, tau, rho);
    int n = static_cast<int>(ms.mu.size());
    MatrixXd prod = inv * ms.V;
    REQUIRE((prod - MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, ms.V.cwiseAbs().maxCoeff()));
    REQUIRE(relative_deviation(inv, ms.V.inverse()) <= 1e-9);
  }
}

TEST_CASE("closed-form inverse limiting cases", "[moments]") {
  VectorXd times(2);
  times << 0, 1;
  ModelSpec line = ModelSpec::straight_line(0.3, 0.4);
  ItemLayout l = ItemLayout::common(times, {2, 2}, 1.0);

  MomentSet fixed = assemble_moments(line, l, 0.0, 0.6);
  CHECK(v_inverse_closed_form(fixed, 0.0, 0.6)
            .isApprox(MatrixXd(fixed.mu.cwiseInverse().asDiagonal()), 1e-12));

  MomentSet uncorr = assemble_moments(line, l, 0.8, 0.0);
  MatrixXd inv = v_inverse_closed_form(uncorr, 0.8, 0.0);
  CHECK(inv.block(0, 2, 2, 2).cwiseAbs().maxCoeff() == 0.0);  // block diagonal
}

TEST_CASE("brute-force quasi-information scalar case", "[moments]") {
  VectorXd times(1);
  times << 0.0;
  VectorXd b(1);
  b << 0.9;
  ModelSpec m = ModelSpec::linear({BasisFn::constant()}, b);
  ItemLayout l = ItemLayout::common(times, {1}, 1.0);
  double mu = std::exp(0.9);
  for (double tau : {0.0, 0.5, 2.0}) {
    MomentSet ms = assemble_moments(m, l, tau, 0.3);
    MatrixXd info = individual_quasi_info_bruteforce(ms);
    CHECK(info(0, 0) == Approx(mu / (1.0 + tau * mu)).epsilon(1e-12));
  }
}

TEST_CASE("tau = 0 quasi-information reduces to F' diag(n_j mu_j) F", "[moments]") {
  VectorXd times(3);
  times << 0, 1, 2;
  ModelSpec line = ModelSpec::straight_line(0.2, 0.35);
  ItemLayout l = ItemLayout::common(times, {3, 1, 2}, 1.25);
  MomentSet ms = assemble_moments(line, l, 0.0, 0.4);
  MatrixXd F = regression_matrix(line, times).F;
  VectorXd d(3);
  for (int j = 0; j < 3; ++j)
    d[j] = l.counts[j] * mean_response(line, 1.25, times[j]);
  CHECK(relative_deviation(individual_quasi_info_bruteforce(ms),
                           MatrixXd(F.transpose() * d.asDiagonal() * F)) <= 1e-12);
}

TEST_CASE("V is positive definite for valid inputs", "[moments]") {
  Urng g(77);
  for (int rep = 0; rep < 100; ++rep) {
    MomentSet ms = random_moments(g);
    REQUIRE(min_eigenvalue(ms.V) > 0.0);
  }
}

TEST_CASE("quasi-information is Loewner-increasing in easiness", "[moments]") {
  Urng g(913);
  for (int rep = 0; rep < 100; ++rep) {
    int J = rint(g, 2, 4);
    VectorXd times = increasing_times(g, J);
    ModelSpec m = random_model(g, times);
    ItemLayout l = random_layout(g, times, 10, /*allow_empty=*/false);
    double tau = runif(g, 0.0, 2.0);
    double rho = runif(g, 0.0, 1.0);
    MatrixXd base = individual_quasi_info_bruteforce(assemble_moments(m, l, tau, rho));

    ItemLayout scaled = l;
    int jpick = rint(g, 0, J - 1);
    int kpick = rint(g, 0, l.counts[jpick] - 1);
    scaled.easiness[jpick][kpick] *= runif(g, 1.0, 3.0);
    MatrixXd up = individual_quasi_info_bruteforce(assemble_moments(m, scaled, tau, rho));
    REQUIRE(min_eigenvalue(up - base) >= -1e-10);
  }
}

TEST_CASE("empty blocks are zero-length segments", "[moments]") {
  VectorXd times(3);
  times << 0, 1, 2;
  ModelSpec line = ModelSpec::straight_line(0.1, 0.1);
  ItemLayout l = ItemLayout::common(times, {2, 0, 1}, 1.0);
  MomentSet ms = assemble_moments(line, l, 0.5, 0.5);
  CHECK(ms.mu.size() == 3);
  CHECK(ms.V.rows() == 3);
  // the closed-form inverse must skip the void block cleanly
  CHECK(relative_deviation(v_inverse_closed_form(ms, 0.5, 0.5), ms.V.inverse()) <= 1e-10);
}
