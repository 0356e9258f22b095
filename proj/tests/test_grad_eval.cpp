#include "psvo/eval.hpp"
#include "psvo/grad.hpp"
#include "psvo/linear.hpp"
#include "psvo/systems.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

using namespace psvo;

namespace {

struct Toy {
  SsmModel model;
  ParameterStore store;
  Matrix x;
};

Toy toy(bool shared = true) {
  ModelConfig mc;
  mc.d_x = 1;
  mc.d_z = 2;
  mc.d_c = 3;
  mc.hidden_widths = {6};
  mc.share_transition = shared;
  SsmModel model(mc);
  Rng rng(2);
  ParameterStore p = model.initialize(rng);
  FnConfig fc;
  fc.T = 8;
  return {std::move(model), std::move(p), simulate_fn(fc, 1, 3).trials[0].observations};
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Estimators

TEST(Estimators, ParseAndName) {
  EXPECT_EQ(EstimatorKind::parse("biased").name(), "biased");
  EXPECT_EQ(EstimatorKind::parse("categorical").name(), "categorical");
  EXPECT_EQ(EstimatorKind::parse("concrete").name(), "concrete:0.2");
  EXPECT_EQ(EstimatorKind::parse("concrete:0.5").name(), "concrete:0.5");
  EXPECT_EQ(EstimatorKind::parse("concrete:inverseK").name(), "concrete:inverseK");
  EXPECT_DOUBLE_EQ(EstimatorKind::concrete_inverse_k().temperature_for(16), 1.0 / 16.0);
  EXPECT_THROW(EstimatorKind::parse("concrete:-1"), std::invalid_argument);
  EXPECT_THROW(EstimatorKind::parse("concrete:abc"), std::invalid_argument);
  EXPECT_THROW(EstimatorKind::parse("reinforce"), std::invalid_argument);
}

TEST(Estimators, BiasedGradientMatchesFiniteDifferencesAtFrozenRandomness) {
  const Toy t = toy(false);
  Rng rng(4);
  SmcRandomness frozen;
  const GradientSample g = estimate_gradient(t.model, t.store, t.x, 3, EstimatorKind::biased(), rng, &frozen);
  auto f = [&](const ParameterStore& s) {
    ad::Tape tape;
    ModelEval eval(t.model, s, tape, false);
    Rng unused(0);
    return smc_filter(eval, t.x, 3, unused, {}, nullptr, &frozen).log_z.scalar();
  };
  for (const auto& [name, p] : t.store.entries()) {
    for (Index i = 0; i < p.value.size(); ++i) {
      ParameterStore up = t.store;
      ParameterStore down = t.store;
      Matrix v = p.value;
      v.data()[i] += 1e-5;
      up.set(name, v);
      v.data()[i] -= 2e-5;
      down.set(name, v);
      const double fd = (f(up) - f(down)) / 2e-5;
      EXPECT_NEAR(g.gradients.at(name).data()[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << name << "[" << i << "]";
    }
  }
}

TEST(Estimators, ScoreTermIsAncestorLogProbabilities) {
  const Toy t = toy();
  Rng a(5);
  SmcRandomness rec;
  const GradientSample g = estimate_gradient(t.model, t.store, t.x, 4, EstimatorKind::categorical(), a, &rec);
  ad::Tape tape;
  ModelEval eval(t.model, t.store, tape, false);
  Rng unused(0);
  const SmcResult r = smc_filter(eval, t.x, 4, unused, {}, nullptr, &rec);
  double score = 0.0;
  for (Index s = 1; s < r.system.length(); ++s) {
    const auto si = static_cast<std::size_t>(s);
    for (Index anc : r.system.ancestors[si]) score += std::log(r.system.weights[si - 1](anc));
  }
  EXPECT_NEAR(g.score, score, 1e-10);
  EXPECT_NEAR(g.log_z, r.log_z.scalar(), 1e-12);
}

TEST(Estimators, ConcreteAndCategoricalProduceFiniteGradients) {
  const Toy t = toy(false);
  for (const EstimatorKind& k :
       {EstimatorKind::categorical(), EstimatorKind::concrete(0.2), EstimatorKind::concrete_inverse_k()}) {
    Rng rng(6);
    const GradientSample g = estimate_gradient(t.model, t.store, t.x, 4, k, rng);
    for (Group grp : kAllGroups) EXPECT_TRUE(t.store.flatten(g.gradients, grp).allFinite()) << k.name();
  }
}

// ---------------------------------------------------------------------------------------------
// SNR

TEST(Snr, StatisticsOnKnownSamples) {
  Matrix s(3, 4);
  s << 1.0, 2.0, 3.0, 4.0,  //
      5.0, 5.0, 5.0, 5.0,   //
      -1.0, 1.0, -1.0, 1.0;
  const SnrPoint p = snr_statistics(s, 8);
  EXPECT_DOUBLE_EQ(p.mean(0), 2.5);
  EXPECT_NEAR(p.std(0), std::sqrt(5.0 / 3.0), 1e-14);
  EXPECT_EQ(p.std(1), 0.0);
  // Element 1 has zero variance and is left out of snr_l2; element 2 has zero mean.
  EXPECT_NEAR(p.snr_l2, 2.5 / std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_NEAR(p.snr_agg, std::sqrt(2.5 * 2.5 + 25.0) / std::sqrt(5.0 / 3.0 + 4.0 / 3.0), 1e-12);
  EXPECT_FALSE(p.degenerate);
  EXPECT_TRUE(snr_statistics(Matrix::Ones(2, 3), 1).degenerate);
  EXPECT_THROW(snr_statistics(Matrix::Ones(2, 1), 1), std::invalid_argument);
}

TEST(Snr, SlopeOfPowerLaw) {
  std::vector<double> k{4, 8, 16, 32, 64, 128};
  std::vector<double> y;
  for (double v : k) y.push_back(3.0 * std::pow(v, 0.5));
  EXPECT_NEAR(log_log_slope(k, y), 0.5, 1e-12);
  y[2] = std::numeric_limits<double>::infinity();  // dropped
  EXPECT_NEAR(log_log_slope(k, y), 0.5, 1e-12);
  EXPECT_TRUE(std::isnan(log_log_slope({4}, {1.0})));
}

TEST(Snr, ReportIsIndependentOfThreadCount) {
  const Toy t = toy();
  SnrOptions opt;
  opt.k_grid = {2, 4};
  opt.samples = 6;
  opt.seed = 7;
  const SnrReport a = measure_snr(t.model, t.store, t.x, {EstimatorKind::biased()}, opt);
  opt.threads = 3;
  const SnrReport b = measure_snr(t.model, t.store, t.x, {EstimatorKind::biased()}, opt);
  for (Group g : kAllGroups) {
    const SnrSeries& sa = a.find("biased", g);
    const SnrSeries& sb = b.find("biased", g);
    ASSERT_EQ(sa.points.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(sa.points[i].snr_l2, sb.points[i].snr_l2);
  }
  EXPECT_THROW(a.find("concrete:0.2", Group::Theta), std::out_of_range);
}

// ---------------------------------------------------------------------------------------------
// Rollouts and R²

TEST(Eval, RolloutOfLinearModelIsMatrixPower) {
  const LinearInstance li = make_linear_instance(3, 2, 5);
  const SsmModel model(linear_model_config(2, 2));
  Rng rng(8);
  const ParameterStore p = embed_linear(model, li.system, rng);
  Matrix z0(1, 2);
  z0 << 0.3, -0.7;
  const auto out = rollout(model, p, z0, 3);
  Eigen::VectorXd z = z0.transpose();
  for (Index k = 1; k <= 3; ++k) {
    z = li.system.A * z;
    const Eigen::VectorXd xk = li.system.C * z;
    EXPECT_LT((out[static_cast<std::size_t>(k - 1)].transpose() - xk).norm(), 1e-12);
  }
}

TEST(Eval, PredictionsAlignWithTargets) {
  const Toy t = toy();
  Rng rng(9);
  const auto preds = k_step_predict(t.model, t.store, t.x, 3, {InferenceMode::Filter, 4, 1}, rng);
  ASSERT_EQ(preds.size(), 3u);
  for (Index k = 1; k <= 3; ++k) EXPECT_EQ(preds[static_cast<std::size_t>(k - 1)].rows(), t.x.rows() - k);
  EXPECT_THROW(k_step_predict(t.model, t.store, t.x, t.x.rows(), {}, rng), std::invalid_argument);
  EXPECT_THROW(k_step_predict(t.model, t.store, t.x, 0, {}, rng), std::invalid_argument);
}

TEST(Eval, RSquaredPoolsAcrossTrials) {
  Matrix a(4, 1), b(4, 1);
  a << 0, 1, 2, 3;
  b << 1, 1, 1, 5;
  // k = 1 targets: a[1:] = {1,2,3}, b[1:] = {1,1,5}; predictions are all 2.
  std::vector<std::vector<Matrix>> preds{{Matrix::Constant(3, 1, 2.0)}, {Matrix::Constant(3, 1, 2.0)}};
  const RolloutReport r = r_squared(preds, {a, b}, 1);
  const double err = (1 + 0 + 1) + (1 + 1 + 9);
  const double base = (1 + 0 + 1) + (16.0 / 9 + 16.0 / 9 + 64.0 / 9);
  EXPECT_NEAR(r.mse[0], err, 1e-12);
  EXPECT_NEAR(r.mse_mean[0], err / 6.0, 1e-12);
  EXPECT_NEAR(r.r2_at(1), 1.0 - err / base, 1e-12);
  EXPECT_NEAR(r.trial_r2[0][0], 0.0, 1e-12);
}

TEST(Eval, ConstantTargetGivesNan) {
  std::vector<std::vector<Matrix>> preds{{Matrix::Zero(2, 1)}};
  const RolloutReport r = r_squared(preds, {Matrix::Ones(3, 1)}, 1);
  EXPECT_TRUE(std::isnan(r.r2_at(1)));
}

// ---------------------------------------------------------------------------------------------
// Systems

TEST(Systems, Rk4IsFourthOrder) {
  auto err = [](double dt) {
    Eigen::VectorXd y0(2);
    y0 << 1.0, 0.0;
    const auto steps = static_cast<Index>(std::llround(1.0 / dt));
    const Matrix y = rk4_integrate([](const Eigen::VectorXd& v) { return Eigen::VectorXd((Eigen::VectorXd(2) << v(1), -v(0)).finished()); },
                                   y0, dt, steps + 1);
    return std::hypot(y(steps, 0) - std::cos(1.0), y(steps, 1) + std::sin(1.0));
  };
  EXPECT_NEAR(std::log2(err(0.05) / err(0.025)), 4.0, 0.1);
}

TEST(Systems, FnDatasetShapeSplitAndDeterminism) {
  const Dataset a = simulate_fn(FnConfig{}, 100, 1);
  const Dataset b = simulate_fn(FnConfig{}, 100, 1);
  const Dataset c = simulate_fn(FnConfig{}, 100, 2);
  a.validate();
  EXPECT_EQ(a.size(), 100);
  EXPECT_EQ(a.length(), 200);
  EXPECT_EQ(a.d_x(), 1);
  EXPECT_EQ(a.d_z(), 2);
  EXPECT_EQ(a.train.size(), 66u);
  EXPECT_EQ(a.val.size(), 17u);
  EXPECT_EQ(a.test.size(), 17u);
  EXPECT_EQ(a.trials[5].observations, b.trials[5].observations);
  EXPECT_NE(a.trials[5].observations, c.trials[5].observations);
  EXPECT_EQ(a.metadata.at("config_hash"), b.metadata.at("config_hash"));
}

TEST(Systems, FnObservationIsNoisyVoltage) {
  FnConfig cfg;
  cfg.obs_noise_var = 0.0;
  const Dataset d = simulate_fn(cfg, 2, 3);
  EXPECT_EQ(d.trials[0].observations.col(0), d.trials[0].latents.col(0));
}

TEST(Systems, LorenzDataset) {
  LorenzConfig cfg;
  const Dataset d = simulate_lorenz(cfg, 6, 4);
  d.validate();
  EXPECT_EQ(d.d_z(), 3);
  EXPECT_TRUE(d.trials[0].observations.allFinite());
}

TEST(Systems, SplitCountsValidated) {
  Dataset d = simulate_fn(FnConfig{}, 10, 1);
  EXPECT_THROW(d.assign_splits({5, 5, 5}), std::invalid_argument);
  d.assign_splits({8, 1, 1});
  EXPECT_EQ(d.train.size(), 8u);
  EXPECT_EQ(SplitCounts::proportional(100).train, 66);
}

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("psvo_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Ingest, RowPerTrialSegmentsThenDownsamples) {
  const auto dir = temp_dir("ingest_rows");
  std::ofstream f(dir / "data.csv");
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 12; ++c) f << (c == 0 ? "" : ",") << (r + 1) * (c + 1);
    f << "\n";
  }
  f.close();
  IngestConfig cfg;
  cfg.segments_per_trial = 2;
  cfg.downsample_to = 3;
  const Dataset d = ingest_csv(dir / "data.csv", cfg);
  ASSERT_EQ(d.size(), 12);
  EXPECT_EQ(d.length(), 3);
  // Row 1 normalized by its maximum (12): first segment is bins 1..6, strided by 2.
  EXPECT_NEAR(d.trials[0].observations(1, 0), 3.0 / 12.0, 1e-15);
  EXPECT_NEAR(d.trials[1].observations(0, 0), 7.0 / 12.0, 1e-15);
  EXPECT_EQ(d.train.size() + d.val.size() + d.test.size(), 12u);
}

TEST(Ingest, DirectoryOfTrials) {
  const auto dir = temp_dir("ingest_dir");
  for (int i = 0; i < 3; ++i) {
    std::ofstream f(dir / ("t" + std::to_string(i) + ".csv"));
    for (int t = 0; t < 4; ++t) f << t << "," << -t * (i + 1) << "\n";
  }
  IngestConfig cfg;
  cfg.normalize_max = false;
  cfg.split = SplitCounts{1, 1, 1};
  const Dataset d = ingest_csv(dir, cfg);
  EXPECT_EQ(d.size(), 3);
  EXPECT_EQ(d.d_x(), 2);
  EXPECT_EQ(d.trials[2].observations(3, 1), -9.0);
}

TEST(Ingest, RejectsMalformedInput) {
  const auto dir = temp_dir("ingest_bad");
  {
    std::ofstream f(dir / "ragged.csv");
    f << "1,2,3\n4,5\n";
  }
  {
    std::ofstream f(dir / "text.csv");
    f << "1,2,x\n";
  }
  {
    std::ofstream f(dir / "zeros.csv");
    f << "0,0,0,0\n";
  }
  EXPECT_THROW(ingest_csv(dir / "ragged.csv", {}), std::invalid_argument);
  EXPECT_THROW(ingest_csv(dir / "text.csv", {}), std::invalid_argument);
  EXPECT_THROW(ingest_csv(dir / "zeros.csv", {}), std::invalid_argument);
  EXPECT_THROW(ingest_csv(dir / "missing.csv", {}), std::runtime_error);
  IngestConfig too_many;
  too_many.downsample_to = 10;
  std::ofstream(dir / "short.csv") << "1,2,3,4\n";
  EXPECT_THROW(ingest_csv(dir / "short.csv", too_many), std::invalid_argument);
}
