#include "psvo/distributions.hpp"
#include "psvo/linear.hpp"
#include "psvo/oracle/enumeration.hpp"
#include "psvo/oracle/kalman.hpp"
#include "psvo/smc.hpp"
#include "psvo/svo.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace psvo;

namespace {

struct Linear {
  LinearInstance li;
  SsmModel model;
  ParameterStore store;
};

Linear linear(std::uint64_t seed, Index dz, Index T) {
  LinearInstance li = make_linear_instance(seed, dz, T);
  SsmModel model(linear_model_config(dz, dz));
  Rng rng(seed + 1);
  ParameterStore store = embed_linear(model, li.system, rng);
  return {std::move(li), std::move(model), std::move(store)};
}

ParameterStore nonlinear_store(const SsmModel& model, std::uint64_t seed) {
  Rng rng(seed);
  return model.initialize(rng);
}

SsmModel small_model(bool shared = true) {
  ModelConfig mc;
  mc.d_x = 2;
  mc.d_z = 2;
  mc.d_c = 3;
  mc.hidden_widths = {5};
  mc.share_transition = shared;
  return SsmModel(mc);
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Distributions

TEST(Distributions, DiagonalProductMatchesClosedForm) {
  ad::Tape tape;
  Matrix ma(1, 1), la(1, 1), mb(1, 1), lb(1, 1);
  ma << 1.0;
  la << std::log(2.0);
  mb << -0.5;
  lb << std::log(0.5);
  const Gaussian p = gaussian_product(diag_gaussian(tape.constant(ma), tape.constant(la)),
                                      diag_gaussian(tape.constant(mb), tape.constant(lb)));
  const auto [m, s] = oracle::detail::product(1.0, 2.0, -0.5, 0.5);
  EXPECT_NEAR(p.mean.scalar(), m, 1e-14);
  EXPECT_NEAR(std::exp(p.log_std.scalar()), s, 1e-14);
}

TEST(Distributions, FullProductAgreesWithDiagonal) {
  ad::Tape tape;
  Rng rng(1);
  const Matrix ma = rng.normal_matrix(3, 2);
  const Matrix la = 0.3 * rng.normal_matrix(3, 2);
  const Matrix mb = rng.normal_matrix(3, 2);
  const Matrix lb = 0.3 * rng.normal_matrix(3, 2);
  std::vector<Var> covs;
  for (Index i = 0; i < 3; ++i) {
    covs.push_back(tape.constant(Matrix(la.row(i).array().exp().square().matrix().asDiagonal())));
  }
  const Gaussian b = diag_gaussian(tape.constant(mb), tape.constant(lb));
  const Gaussian d = gaussian_product(diag_gaussian(tape.constant(ma), tape.constant(la)), b);
  const Gaussian f = gaussian_product(full_gaussian(tape.constant(ma), covs), b);
  EXPECT_LT((d.mean.value() - f.mean.value()).cwiseAbs().maxCoeff(), 1e-12);
  const Matrix x = rng.normal_matrix(3, 2);
  EXPECT_LT((gaussian_log_pdf(d, tape.constant(x)).value() - gaussian_log_pdf(f, tape.constant(x)).value())
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(Distributions, CrossLogPdfMatchesRowwise) {
  ad::Tape tape;
  Rng rng(2);
  // Diagonal components share one log_std row.
  const Matrix ls = 0.2 * rng.normal_matrix(1, 2);
  const Gaussian g = diag_gaussian(tape.constant(rng.normal_matrix(3, 2)), tape.constant(ls.replicate(3, 1)));
  const Matrix x = rng.normal_matrix(4, 2);
  const Matrix cross = gaussian_cross_log_pdf(g, tape.constant(x)).value();  // 4×3
  ASSERT_EQ(cross.rows(), 4);
  ASSERT_EQ(cross.cols(), 3);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 3; ++j) {
      const Gaussian gj = select_rows(g, {j});
      EXPECT_NEAR(cross(i, j), gaussian_log_pdf(gj, tape.constant(x.row(i))).scalar(), 1e-12);
    }
  }
}

TEST(Distributions, RsampleHasRequestedMoments) {
  ad::Tape tape;
  Matrix m(1, 2), ls(1, 2);
  m << 1.0, -2.0;
  ls << std::log(0.5), std::log(3.0);
  const Gaussian g = repeat_each(diag_gaussian(tape.constant(m), tape.constant(ls)), 20000);
  Rng rng(3);
  const Matrix z = gaussian_rsample(g, rng.normal_matrix(20000, 2)).value();
  const Eigen::RowVectorXd mean = z.colwise().mean();
  const Eigen::RowVectorXd sd = ((z.rowwise() - mean).colwise().squaredNorm() / 19999.0).cwiseSqrt();
  EXPECT_NEAR(mean(0), 1.0, 4 * 0.5 / std::sqrt(20000.0));
  EXPECT_NEAR(mean(1), -2.0, 4 * 3.0 / std::sqrt(20000.0));
  EXPECT_NEAR(sd(0), 0.5, 0.02);
  EXPECT_NEAR(sd(1), 3.0, 0.1);
}

TEST(Distributions, CategoricalSkipsZeroWeights) {
  Rng rng(4);
  const std::vector<double> w{0.0, 1.0, 0.0, 2.0, 0.0};
  for (int i = 0; i < 2000; ++i) {
    const Index k = categorical_sample(w, rng);
    EXPECT_TRUE(k == 1 || k == 3);
  }
  EXPECT_THROW(categorical_sample(std::vector<double>{0.0, 0.0}, rng), std::invalid_argument);
  EXPECT_THROW(categorical_sample(std::vector<double>{1.0, -1.0}, rng), std::invalid_argument);
}

TEST(Distributions, NormalizeLogWeightsIsShiftInvariant) {
  Eigen::VectorXd a(3);
  a << -1000.0, -1001.0, -999.0;
  const Eigen::VectorXd w = normalize_log_weights(a);
  EXPECT_NEAR(w.sum(), 1.0, 1e-15);
  EXPECT_NEAR(w(2) / w(0), std::exp(1.0), 1e-12);
}

TEST(Distributions, ConcreteDensityIntegratesToOneForTwoCategories) {
  // For K = 2 the sample is (u, 1−u); the density is with respect to u on (0, 1).
  ad::Tape tape;
  Matrix lw(2, 1);
  lw << std::log(0.3), std::log(0.7);
  for (double lambda : {0.5, 1.0, 2.0}) {
    const int n = 200000;
    Matrix s(n, 2);
    for (int i = 0; i < n; ++i) {
      const double u = (i + 0.5) / n;
      s(i, 0) = u;
      s(i, 1) = 1.0 - u;
    }
    ConcreteSample cs{tape.constant(s), tape.constant(Matrix(s.array().log().matrix())), lambda};
    const Matrix lp = concrete_log_pdf(cs, tape.constant(lw)).value();
    const double integral = lp.array().exp().sum() / n;
    EXPECT_NEAR(integral, 1.0, 2e-3) << "lambda " << lambda;
  }
}

TEST(Distributions, ConcreteArgmaxFollowsWeights) {
  // The argmax of a Concrete draw is distributed as Categorical(w) at every temperature.
  ad::Tape tape;
  Matrix lw(3, 1);
  lw << std::log(0.2), std::log(0.5), std::log(0.3);
  Rng rng(5);
  const Index n = 40000;
  const ConcreteSample cs = concrete_rsample(tape.constant(lw), 0.7, rng.gumbel_matrix(n, 3));
  std::vector<double> count(3, 0.0);
  for (Index i = 0; i < n; ++i) {
    Index k = 0;
    cs.s.value().row(i).maxCoeff(&k);
    count[static_cast<std::size_t>(k)] += 1.0;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double p = std::exp(lw(static_cast<Index>(k), 0));
    EXPECT_NEAR(count[k] / n, p, 4.0 * std::sqrt(p * (1 - p) / n));
  }
}

TEST(Distributions, ConcreteTemperatureLimits) {
  // Hot: every draw is close to uniform. Cold: draws are one-hot, so the mean is w.
  ad::Tape tape;
  Matrix lw(3, 1);
  lw << std::log(0.2), std::log(0.5), std::log(0.3);
  Rng rng(6);
  const Matrix hot = concrete_rsample(tape.constant(lw), 1e6, rng.gumbel_matrix(100, 3)).s.value();
  EXPECT_LT((hot.array() - 1.0 / 3.0).abs().maxCoeff(), 1e-4);
  const Index n = 40000;
  const Matrix cold = concrete_rsample(tape.constant(lw), 1e-3, rng.gumbel_matrix(n, 3)).s.value();
  const Eigen::RowVectorXd mean = cold.colwise().mean();
  for (Index k = 0; k < 3; ++k) {
    const double p = std::exp(lw(k, 0));
    EXPECT_NEAR(mean(k), p, 4.0 * std::sqrt(p * (1 - p) / n));
  }
}

// ---------------------------------------------------------------------------------------------
// Filtering

TEST(Smc, SingleParticleMatchesHandComputedWeights) {
  // K = 1 has no resampling randomness: log Ẑ = Σ_t [log f + log g − log q] at the drawn
  // particles, which the oracle's scalar model evaluates independently.
  const Linear l = linear(31, 1, 2);
  ad::Tape tape;
  ModelEval eval(l.model, l.store, tape, false);
  Rng rng(6);
  SmcRandomness rec;
  const SmcResult r = smc_filter(eval, l.li.observations, 1, rng, {}, &rec);
  const auto m = oracle::detail::ScalarModel::read(l.store);
  const Matrix& x = l.li.observations;
  const auto [q1m, q1s] = oracle::detail::product(m.mu0, m.sd0, m.gamma(x(0, 0)), m.sd_h);
  const double z1 = q1m + q1s * rec.proposal_noise[0](0, 0);
  const double f2 = m.psi(z1);
  const auto [q2m, q2s] = oracle::detail::product(f2, m.sd_f, m.gamma(x(1, 0)), m.sd_h);
  const double z2 = q2m + q2s * rec.proposal_noise[1](0, 0);
  using oracle::detail::normal_log_pdf;
  const double expect = normal_log_pdf(z1, m.mu0, m.sd0) + normal_log_pdf(x(0, 0), m.upsilon(z1), m.sd_g) -
                        normal_log_pdf(z1, q1m, q1s) + normal_log_pdf(z2, f2, m.sd_f) +
                        normal_log_pdf(x(1, 0), m.upsilon(z2), m.sd_g) - normal_log_pdf(z2, q2m, q2s);
  EXPECT_NEAR(r.log_z.scalar(), expect, 1e-12);
}

TEST(Smc, ReplayReproducesRun) {
  const SsmModel model = small_model();
  const ParameterStore p = nonlinear_store(model, 7);
  Rng data_rng(8);
  const Matrix x = data_rng.normal_matrix(6, 2);
  for (ResampleMode mode : {ResampleMode::Categorical, ResampleMode::Concrete, ResampleMode::None}) {
    ad::Tape t1, t2;
    ModelEval e1(model, p, t1, false), e2(model, p, t2, false);
    Rng rng(9);
    Rng other(1234);
    SmcRandomness rec;
    const double a = smc_filter(e1, x, 5, rng, {mode, 0.3}, &rec).log_z.scalar();
    const double b = smc_filter(e2, x, 5, other, {mode, 0.3}, nullptr, &rec).log_z.scalar();
    EXPECT_EQ(a, b);
  }
}

TEST(Smc, WeightsAndLogZBookkeeping) {
  const SsmModel model = small_model(false);
  const ParameterStore p = nonlinear_store(model, 10);
  Rng rng(11);
  const Matrix x = rng.normal_matrix(5, 2);
  ad::Tape tape;
  ModelEval eval(model, p, tape, false);
  const SmcResult r = smc_filter(eval, x, 7, rng);
  ASSERT_EQ(r.system.length(), 5);
  double sum = 0.0;
  for (Index t = 0; t < 5; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const Eigen::VectorXd lw = r.system.log_weights[ti].value();
    const double m = lw.maxCoeff();
    const double step = m + std::log((lw.array() - m).exp().sum()) - std::log(7.0);
    EXPECT_NEAR(step, r.system.log_z_steps[ti], 1e-12);
    EXPECT_LT((r.system.weights[ti] - normalize_log_weights(lw)).cwiseAbs().maxCoeff(), 1e-12);
    sum += step;
    if (t > 0) {
      for (Index a : r.system.ancestors[ti]) EXPECT_TRUE(a >= 0 && a < 7);
    }
  }
  EXPECT_NEAR(r.log_z.scalar(), sum, 1e-10);
  const Matrix fm = filtered_means(r.system);
  EXPECT_LT((fm.row(2).transpose() - r.system.particles[2].value().transpose() * r.system.weights[2]).norm(), 1e-12);
}

TEST(Smc, NoResamplingKeepsLineages) {
  const SsmModel model = small_model();
  const ParameterStore p = nonlinear_store(model, 12);
  Rng rng(13);
  const Matrix x = rng.normal_matrix(4, 2);
  ad::Tape tape;
  ModelEval eval(model, p, tape, false);
  const SmcResult r = smc_filter(eval, x, 3, rng, {ResampleMode::None, 0.2});
  for (Index t = 1; t < 4; ++t) {
    const auto& a = r.system.ancestors[static_cast<std::size_t>(t)];
    for (Index k = 0; k < 3; ++k) EXPECT_EQ(a[static_cast<std::size_t>(k)], k);
  }
}

TEST(Smc, RejectsBadArguments) {
  const SsmModel model = small_model();
  const ParameterStore p = nonlinear_store(model, 14);
  ad::Tape tape;
  ModelEval eval(model, p, tape, false);
  Rng rng(15);
  EXPECT_THROW(smc_filter(eval, Matrix::Zero(5, 2), 0, rng), std::invalid_argument);
  EXPECT_THROW(smc_filter(eval, Matrix::Zero(1, 2), 3, rng), std::invalid_argument);
  EXPECT_THROW(smc_filter(eval, Matrix::Zero(5, 3), 3, rng), std::invalid_argument);
  EXPECT_THROW(smc_filter(eval, Matrix::Zero(5, 2), 3, rng, {ResampleMode::Concrete, 0.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------------------------
// Backward simulation

TEST(Svo, SingleTrajectoryRatioMatchesJointDensity) {
  // With K = M = 1 the objective is log p(z̃, x) − Σ_t log Ω_t; the joint is checked against
  // the direct linear-Gaussian density.
  const Linear l = linear(41, 2, 4);
  ad::Tape tape;
  ModelEval eval(l.model, l.store, tape, false);
  Rng rng(16);
  const SvoRun run = run_svo(eval, l.li.observations, 1, 1, rng);
  Matrix z(4, 2);
  for (Index t = 0; t < 4; ++t) z.row(t) = run.sweep.trajectories[static_cast<std::size_t>(t)].value();
  const double joint = oracle::lgssm_joint_log_density(l.li.system, z, l.li.observations);
  EXPECT_NEAR(run.objective.log_z.scalar(), joint - run.sweep.log_q.scalar(), 1e-10);
}

TEST(Svo, SweepStructure) {
  const SsmModel model = small_model();
  const ParameterStore p = nonlinear_store(model, 17);
  Rng rng(18);
  const Matrix x = rng.normal_matrix(6, 2);
  ad::Tape tape;
  ModelEval eval(model, p, tape, false);
  const Index K = 4;
  const Index M = 3;
  const SvoRun run = run_svo(eval, x, K, M, rng);
  const BackwardSweep& s = run.sweep;
  EXPECT_EQ(s.transition_evaluations, expected_transition_evaluations(6, K, M));
  for (Index t = 0; t < 6; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    EXPECT_LT((s.subweights[ti].rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    for (Index k = 0; k < K; ++k) {
      const Index b = s.indices[ti][static_cast<std::size_t>(k)];
      ASSERT_TRUE(b >= 0 && b < M);
      EXPECT_EQ(s.trajectories[ti].value().row(k), s.subparticles[ti].row(k * M + b));
    }
  }
  // Σ_t log Ω_t per trajectory.
  Eigen::VectorXd total = Eigen::VectorXd::Zero(K);
  for (const Var& lo : s.log_omega) total += lo.value();
  EXPECT_LT((total - s.log_q.value()).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix means = smoothed_means(s, run.objective);
  EXPECT_EQ(means.rows(), 6);
  EXPECT_EQ(means.cols(), 2);
}

TEST(Svo, ReplayReproducesSweep) {
  const SsmModel model = small_model(false);
  const ParameterStore p = nonlinear_store(model, 19);
  Rng rng(20);
  const Matrix x = rng.normal_matrix(5, 2);
  ad::Tape t1, t2;
  ModelEval e1(model, p, t1, false), e2(model, p, t2, false);
  SmcRandomness fr;
  SvoRandomness br;
  Rng a(21);
  const SmcResult f1 = smc_filter(e1, x, 3, a, {}, &fr);
  const double l1 = svo_objective(e1, backward_simulate(e1, f1.system, x, 2, a, &br), x).log_z.scalar();
  Rng b(99);
  const SmcResult f2 = smc_filter(e2, x, 3, b, {}, nullptr, &fr);
  const double l2 = svo_objective(e2, backward_simulate(e2, f2.system, x, 2, b, nullptr, &br), x).log_z.scalar();
  EXPECT_EQ(l1, l2);
}

TEST(Svo, GradientsFlowToEveryGroup) {
  const SsmModel model = small_model(false);
  const ParameterStore p = nonlinear_store(model, 22);
  Rng rng(23);
  const Matrix x = rng.normal_matrix(5, 2);
  ad::Tape tape;
  ModelEval eval(model, p, tape);
  const SvoRun run = run_svo(eval, x, 3, 2, rng);
  const GradientSet g = eval.params().gradients(tape.backward(run.objective.log_z));
  for (Group grp : kAllGroups) {
    const Eigen::VectorXd v = p.flatten(g, grp);
    EXPECT_TRUE(v.allFinite());
    EXPECT_GT(v.norm(), 0.0) << group_name(grp);
  }
}
