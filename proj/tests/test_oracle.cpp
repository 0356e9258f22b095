#include "psvo/linear.hpp"
#include "psvo/oracle/enumeration.hpp"
#include "psvo/oracle/kalman.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace psvo;

namespace {

oracle::Lgssm scalar_system() {
  oracle::Lgssm s;
  s.A = Matrix::Constant(1, 1, 0.8);
  s.Q = Matrix::Constant(1, 1, 0.3);
  s.C = Matrix::Constant(1, 1, 1.2);
  s.R = Matrix::Constant(1, 1, 0.5);
  s.m0 = Eigen::VectorXd::Constant(1, 0.1);
  s.P0 = Matrix::Constant(1, 1, 1.0);
  return s;
}

Matrix scalar_observations() {
  Matrix x(3, 1);
  x << 0.5, -0.3, 1.1;
  return x;
}

}  // namespace

// Reference values from the dense joint Gaussian of (z_{1:3}, x_{1:3}), computed with scipy.
TEST(Kalman, ScalarMarginalMatchesFrozenDenseValue) {
  EXPECT_NEAR(oracle::kalman_log_marginal(scalar_system(), scalar_observations()), -3.993258969687612, 1e-12);
}

TEST(Kalman, ScalarSmootherMatchesFrozenPosteriorMeans) {
  const auto rts = oracle::kalman_smoother(scalar_system(), scalar_observations());
  EXPECT_NEAR(rts.means[0](0), 0.28908493, 1e-8);
  EXPECT_NEAR(rts.means[1](0), 0.16438651, 1e-8);
  EXPECT_NEAR(rts.means[2](0), 0.49544485, 1e-8);
}

TEST(Kalman, FilterAgreesWithDenseMarginalOnRandomSystems) {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    for (Index dz : {1, 2, 3}) {
      const LinearInstance li = make_linear_instance(seed, dz, 6);
      EXPECT_NEAR(oracle::kalman_log_marginal(li.system, li.observations),
                  oracle::dense_log_marginal(li.system, li.observations), 1e-10)
          << "seed " << seed << " d_z " << dz;
    }
  }
}

TEST(Kalman, SmootherEqualsFilterAtLastStep) {
  const LinearInstance li = make_linear_instance(9, 2, 7);
  const auto rts = oracle::kalman_smoother(li.system, li.observations);
  EXPECT_LT((rts.means.back() - rts.filter.filtered_means.back()).norm(), 1e-12);
}

TEST(GaussHermite, IntegratesStandardNormalMoments) {
  const oracle::GaussHermite gh(10);
  double m0 = 0.0;
  double m2 = 0.0;
  double m4 = 0.0;
  double m6 = 0.0;
  double m3 = 0.0;
  for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
    const double x = gh.nodes[i];
    m0 += gh.weights[i];
    m2 += gh.weights[i] * x * x;
    m3 += gh.weights[i] * x * x * x;
    m4 += gh.weights[i] * std::pow(x, 4);
    m6 += gh.weights[i] * std::pow(x, 6);
  }
  EXPECT_NEAR(m0, 1.0, 1e-13);
  EXPECT_NEAR(m2, 1.0, 1e-12);
  EXPECT_NEAR(m3, 0.0, 1e-12);
  EXPECT_NEAR(m4, 3.0, 1e-11);
  EXPECT_NEAR(m6, 15.0, 1e-10);
}

TEST(GaussHermite, SmoothIntegrandConverges) {
  // E[cos X] = exp(-1/2) for X ~ N(0, 1).
  const oracle::GaussHermite gh(30);
  double s = 0.0;
  for (std::size_t i = 0; i < gh.nodes.size(); ++i) s += gh.weights[i] * std::cos(gh.nodes[i]);
  EXPECT_NEAR(s, std::exp(-0.5), 1e-13);
}

TEST(GaussHermite, RejectsNonPositiveOrder) { EXPECT_THROW(oracle::GaussHermite(0), std::invalid_argument); }

TEST(Enumeration, QuadratureOrderConverged) {
  const SsmModel model(linear_model_config(1, 1));
  Rng rng(3);
  ParameterStore p = model.initialize(rng);
  Matrix x(2, 1);
  x << 0.7, -0.2;
  EXPECT_NEAR(oracle::expected_log_z(p, x, 20), oracle::expected_log_z(p, x, 40), 1e-4);
}

TEST(Enumeration, BelowExactLogMarginal) {
  // Jensen: E[log Ẑ] <= log p(x) on an embedded linear system.
  const LinearInstance li = make_linear_instance(21, 1, 2);
  const SsmModel model(linear_model_config(1, 1));
  Rng rng(4);
  const ParameterStore p = embed_linear(model, li.system, rng);
  EXPECT_LE(oracle::expected_log_z(p, li.observations, 20), oracle::kalman_log_marginal(li.system, li.observations));
}

TEST(Enumeration, RejectsWrongShapes) {
  const SsmModel model(linear_model_config(1, 1));
  Rng rng(3);
  const ParameterStore p = model.initialize(rng);
  EXPECT_THROW(oracle::expected_log_z(p, Matrix::Zero(3, 1), 10), std::invalid_argument);
}

TEST(FiniteDifference, MatchesAnalyticGradientOfQuadratic) {
  ParameterStore s;
  Matrix v(1, 2);
  v << 0.5, -1.5;
  s.add("w", Group::Theta, v);
  auto f = [](const ParameterStore& p) { return p.value("w").squaredNorm() + 3.0 * p.value("w")(0, 1); };
  const GradientSet g = oracle::central_difference_gradient(s, f, 1e-5);
  EXPECT_NEAR(g.at("w")(0, 0), 1.0, 1e-8);
  EXPECT_NEAR(g.at("w")(0, 1), 0.0, 1e-8);
}
