/// @file verify.hpp Acceptance checks, one per criterion, shared by the acceptance test
/// binary and the CLI's verify command.
///
/// Criteria that need trained models train them through the ordinary run pipeline and cache
/// the run directory (keyed by the run config) under VerifyOptions::cache_dir, so separate
/// invocations reuse each other's training.

#ifndef PSVO_VERIFY_HPP
#define PSVO_VERIFY_HPP

#include "psvo/eval.hpp"
#include "psvo/grad.hpp"
#include "psvo/io.hpp"
#include "psvo/linear.hpp"
#include "psvo/oracle/enumeration.hpp"
#include "psvo/oracle/kalman.hpp"
#include "psvo/run.hpp"
#include "psvo/smc.hpp"
#include "psvo/svo.hpp"
#include "psvo/systems.hpp"
#include "psvo/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace psvo::acceptance {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  double seconds = 0.0;
  std::string detail;
};

struct VerifyOptions {
  std::set<int> only;  // empty: every criterion
  int threads = 1;
  std::ostream* log = nullptr;
  std::filesystem::path cache_dir = "acceptance_cache";
};

namespace detail {

inline std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

/// Mean and standard error of a sample.
struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  const auto n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

inline void say(const VerifyOptions& o, const std::string& msg) {
  if (o.log != nullptr) *o.log << "  " << msg << std::endl;
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Reference linear-Gaussian instances

struct LinearCase {
  std::uint64_t seed;
  Index d_z;
  Index T;
};

inline const std::vector<LinearCase>& linear_cases() {
  static const std::vector<LinearCase> cases{{101, 1, 3}, {102, 1, 5}, {103, 2, 3}, {104, 2, 5}};
  return cases;
}

/// Replicates of Ẑ / p(x) (importance ratio to the exact marginal) for one instance.
inline detail::MeanSe marginal_ratio(const LinearCase& c, Index K, Index M, Index reps, std::uint64_t seed) {
  const LinearInstance li = make_linear_instance(c.seed, c.d_z, c.T);
  const SsmModel model(linear_model_config(c.d_z, c.d_z));
  Rng init = Rng::stream(c.seed, {1});
  const ParameterStore store = embed_linear(model, li.system, init);
  const double log_p = oracle::kalman_log_marginal(li.system, li.observations);
  std::vector<double> ratio;
  ratio.reserve(static_cast<std::size_t>(reps));
  Rng rng = Rng::stream(seed, {c.seed, static_cast<std::uint64_t>(K), static_cast<std::uint64_t>(M)});
  for (Index r = 0; r < reps; ++r) {
    ad::Tape tape;
    ModelEval eval(model, store, tape, false);
    SmcResult f = smc_filter(eval, li.observations, K, rng);
    double log_z = f.log_z.scalar();
    if (M > 0) {
      BackwardSweep sweep = backward_simulate(eval, f.system, li.observations, M, rng);
      log_z = svo_objective(eval, sweep, li.observations).log_z.scalar();
    }
    ratio.push_back(std::exp(log_z - log_p));
  }
  return detail::mean_se(ratio);
}

inline CriterionResult unbiased_marginal(int id, const std::string& name, const std::vector<std::pair<Index, Index>>& km,
                                         const VerifyOptions& o) {
  CriterionResult r{id, name, true, 0.0, ""};
  double worst = 0.0;
  for (const LinearCase& c : linear_cases()) {
    for (auto [K, M] : km) {
      const detail::MeanSe s = marginal_ratio(c, K, M, 50000, 17);
      const double z = (s.mean - 1.0) / s.se;
      worst = std::max(worst, std::abs(z));
      if (!(std::abs(z) < 3.0)) r.pass = false;
      detail::say(o, "d_z=" + std::to_string(c.d_z) + " T=" + std::to_string(c.T) + " K=" + std::to_string(K) +
                         (M > 0 ? " M=" + std::to_string(M) : "") + ": mean Z/p = " + detail::fmt(s.mean, 6) +
                         " ± " + detail::fmt(s.se, 3) + " (z = " + detail::fmt(z, 3) + ")");
    }
  }
  r.detail = "max |mean - p(x)| / SE = " + detail::fmt(worst, 3) + " over " +
             std::to_string(linear_cases().size() * km.size()) + " cases (limit 3)";
  return r;
}

inline CriterionResult criterion_smc_unbiased(const VerifyOptions& o) {
  return unbiased_marginal(1, "smc_marginal_unbiased", {{1, 0}, {4, 0}, {16, 0}}, o);
}

inline CriterionResult criterion_svo_unbiased(const VerifyOptions& o) {
  return unbiased_marginal(2, "svo_marginal_unbiased", {{1, 1}, {4, 3}}, o);
}

inline CriterionResult criterion_smoother(const VerifyOptions& o) {
  CriterionResult r{3, "svo_smoother_means", true, 0.0, ""};
  const LinearCase c{102, 1, 5};
  const LinearInstance li = make_linear_instance(c.seed, c.d_z, c.T);
  const SsmModel model(linear_model_config(1, 1));
  Rng init = Rng::stream(c.seed, {1});
  const ParameterStore store = embed_linear(model, li.system, init);
  const oracle::SmootherResult rts = oracle::kalman_smoother(li.system, li.observations);
  const Index reps = 1000;
  std::vector<std::vector<double>> per_t(static_cast<std::size_t>(c.T));
  Rng rng = Rng::stream(23, {c.seed});
  for (Index i = 0; i < reps; ++i) {
    ad::Tape tape;
    ModelEval eval(model, store, tape, false);
    SvoRun run = run_svo(eval, li.observations, 16, 16, rng);
    const Matrix m = smoothed_means(run.sweep, run.objective);
    for (Index t = 0; t < c.T; ++t) per_t[static_cast<std::size_t>(t)].push_back(m(t, 0));
  }
  double worst = 0.0;
  for (Index t = 0; t < c.T; ++t) {
    const detail::MeanSe s = detail::mean_se(per_t[static_cast<std::size_t>(t)]);
    const double truth = rts.means[static_cast<std::size_t>(t)](0);
    const double z = (s.mean - truth) / s.se;
    worst = std::max(worst, std::abs(z));
    if (!(std::abs(z) < 3.0)) r.pass = false;
    detail::say(o, "t=" + std::to_string(t + 1) + ": SVO " + detail::fmt(s.mean, 6) + " ± " + detail::fmt(s.se, 3) +
                       ", RTS " + detail::fmt(truth, 6) + " (z = " + detail::fmt(z, 3) + ")");
  }
  r.detail = "max |SVO mean - RTS mean| / SE = " + detail::fmt(worst, 3) + " over T=5 (limit 3)";
  return r;
}

// ---------------------------------------------------------------------------------------------
// Gradients

/// Small nonlinear model on the first 10 steps of a simulated FN trial.
struct ToyProblem {
  SsmModel model;
  ParameterStore params;
  Matrix x;
};

inline ToyProblem fn_toy_problem() {
  FnConfig fc;
  fc.T = 10;
  const Dataset ds = simulate_fn(fc, 1, 5);
  ModelConfig mc;
  mc.d_x = 1;
  mc.d_z = 2;
  mc.d_c = 4;
  mc.hidden_widths = {8};
  mc.transition_std = 0.3;
  SsmModel model(mc);
  Rng rng(11);
  ParameterStore p = model.initialize(rng);
  return {std::move(model), std::move(p), ds.trials[0].observations};
}

/// Max over parameter groups of ‖g − fd‖∞ / ‖fd‖∞ for the biased estimator at frozen randomness.
inline double biased_gradient_error(const ToyProblem& prob, Index K, double h, std::string* report) {
  Rng rng(3);
  SmcRandomness frozen;
  const GradientSample g = estimate_gradient(prob.model, prob.params, prob.x, K, EstimatorKind::biased(), rng, &frozen);
  auto f = [&](const ParameterStore& s) {
    ad::Tape tape;
    ModelEval eval(prob.model, s, tape, false);
    Rng unused(0);
    return smc_filter(eval, prob.x, K, unused, {}, nullptr, &frozen).log_z.scalar();
  };
  const GradientSet fd = oracle::central_difference_gradient(prob.params, f, h);
  double worst = 0.0;
  for (Group grp : kAllGroups) {
    const Eigen::VectorXd a = prob.params.flatten(g.gradients, grp);
    const Eigen::VectorXd b = prob.params.flatten(fd, grp);
    const double scale = b.cwiseAbs().maxCoeff();
    const double err = scale > 0.0 ? (a - b).cwiseAbs().maxCoeff() / scale : (a - b).cwiseAbs().maxCoeff();
    worst = std::max(worst, err);
    if (report != nullptr) *report += std::string(group_name(grp)) + " " + detail::fmt(err, 3) + "; ";
  }
  return worst;
}

inline CriterionResult criterion_gradient_exact(const VerifyOptions& o) {
  CriterionResult r{4, "biased_gradient_matches_finite_differences", false, 0.0, ""};
  const ToyProblem prob = fn_toy_problem();
  std::string groups;
  const double err = biased_gradient_error(prob, 4, 1e-5, &groups);
  r.pass = err < 1e-4;
  detail::say(o, "relative error per group: " + groups);
  r.detail = "max relative error " + detail::fmt(err, 3) + " (limit 1e-4), K=4, T=10";
  return r;
}

/// The T=2, K=2 scalar instance used by the enumeration oracle. Its proposal is wide and
/// the emission sharp, so the importance weights are skewed and resampling matters.
struct TinyProblem {
  SsmModel model;
  ParameterStore params;
  Matrix x;
};

inline TinyProblem skewed_tiny_problem() {
  ModelConfig mc = linear_model_config(1, 1);
  SsmModel model(mc);
  Rng rng(5);
  ParameterStore p = model.initialize(rng);
  auto set = [&](const std::string& n, double v) { p.set(n, Matrix::Constant(1, 1, v)); };
  set("transition.psi.W0", -0.2);
  set("transition.psi.b0", 0.3);
  set("transition.log_std", std::log(0.7));
  set("initial.mean", 0.2);
  set("initial.log_std", std::log(1.0));
  set("emission.upsilon.W0", 1.1);
  set("emission.upsilon.b0", -0.1);
  set("emission.log_std", std::log(0.4));
  set("encoder.gamma.W0", 0.6);
  set("encoder.gamma.b0", 0.2);
  set("encoder.log_std", std::log(1.5));
  Matrix x(2, 1);
  x << 1.3, -0.4;
  return {std::move(model), std::move(p), std::move(x)};
}

struct GradientBiasReport {
  double max_z_unbiased = 0.0;  // categorical score-corrected estimator
  double max_z_biased = 0.0;
  std::string text;
};

inline GradientBiasReport gradient_bias_study(const TinyProblem& prob, Index samples, int threads) {
  auto exact = [&](const ParameterStore& s) { return oracle::expected_log_z(s, prob.x, 20); };
  const GradientSet truth = oracle::central_difference_gradient(prob.params, exact, 1e-4);
  GradientBiasReport out;
  for (const EstimatorKind& kind : {EstimatorKind::categorical(), EstimatorKind::biased()}) {
    std::vector<GradientSet> draws(static_cast<std::size_t>(samples));
    parallel_for(samples, threads, [&](Index i) {
      Rng rng = Rng::stream(29, {static_cast<std::uint64_t>(kind.type == EstimatorKind::Type::Biased), static_cast<std::uint64_t>(i)});
      draws[static_cast<std::size_t>(i)] = estimate_gradient(prob.model, prob.params, prob.x, 2, kind, rng).gradients;
    });
    double worst = 0.0;
    for (const auto& [name, p] : prob.params.entries()) {
      for (Index e = 0; e < p.value.size(); ++e) {
        std::vector<double> v;
        v.reserve(draws.size());
        for (const GradientSet& d : draws) v.push_back(d.at(name).data()[e]);
        const detail::MeanSe s = detail::mean_se(v);
        const double t = truth.at(name).data()[e];
        if (s.se == 0.0) {
          if (std::abs(s.mean - t) > 1e-6) worst = std::numeric_limits<double>::infinity();
          continue;
        }
        const double z = (s.mean - t) / s.se;
        worst = std::max(worst, std::abs(z));
        out.text += kind.name() + " " + name + ": " + detail::fmt(s.mean, 5) + " vs " + detail::fmt(t, 5) +
                    " (z = " + detail::fmt(z, 3) + ")\n";
      }
    }
    (kind.type == EstimatorKind::Type::Biased ? out.max_z_biased : out.max_z_unbiased) = worst;
  }
  return out;
}

inline CriterionResult criterion_score_unbiased(const VerifyOptions& o) {
  CriterionResult r{5, "score_corrected_gradient_unbiased", false, 0.0, ""};
  const TinyProblem prob = skewed_tiny_problem();
  const GradientBiasReport rep = gradient_bias_study(prob, 100000, o.threads);
  if (o.log != nullptr) *o.log << rep.text;
  // Unbiased: every element within 3 SE. Biased: at least one element off by more than
  // 5 SE, a margin that survives the multiple comparisons across elements.
  r.pass = rep.max_z_unbiased < 3.0 && rep.max_z_biased > 5.0;
  r.detail = "categorical max |z| = " + detail::fmt(rep.max_z_unbiased, 3) + " (limit 3); biased max |z| = " +
             detail::fmt(rep.max_z_biased, 3) + " (needs > 5); 1e5 samples, T=2, K=2";
  return r;
}

// ---------------------------------------------------------------------------------------------
// Training recipes

/// FN data: 100 trials, 66/17/17 split.
inline Json fn_data_json() { return Json{{"system", "fn"}, {"config", Json::object()}, {"trials", 100}, {"seed", 1}}; }

inline Json fn_model_json(bool shared) {
  return Json{{"d_x", 1}, {"d_z", 2}, {"d_c", 8}, {"hidden_widths", {16, 16}}, {"share_transition", shared}};
}

inline constexpr Index kFnEpochs = 100;
// Chosen per objective from {1e-3, 3e-3, 1e-2} by final validation objective on a
// separate seed; the filtering objective diverges at 1e-2.
inline constexpr double kFnLearningRate = 1e-2;
inline constexpr double kFnSmcLearningRate = 3e-3;
inline constexpr Index kSharedStudyEpochs = 60;

inline Json fn_svo_recipe(std::uint64_t seed) {
  return Json{{"objective", "svo"}, {"K", 8}, {"M", 8}, {"epochs", kFnEpochs}, {"batch_size", 8},
              {"learning_rate", kFnLearningRate}, {"seed", seed}, {"model", fn_model_json(true)},
              {"data", fn_data_json()}, {"output_dir", "fn_svo_k8_m8_seed" + std::to_string(seed)}};
}

inline Json fn_smc_recipe(std::uint64_t seed) {
  return Json{{"objective", "smc"}, {"K", 64}, {"estimator", "biased"}, {"epochs", kFnEpochs}, {"batch_size", 8},
              {"learning_rate", kFnSmcLearningRate}, {"seed", seed}, {"model", fn_model_json(true)},
              {"data", fn_data_json()}, {"output_dir", "fn_smc_k64_seed" + std::to_string(seed)}};
}

inline Json fn_shared_study_recipe(bool shared, std::uint64_t seed) {
  return Json{{"objective", "svo"}, {"K", 16}, {"M", 4}, {"epochs", kSharedStudyEpochs}, {"batch_size", 8},
              {"learning_rate", kFnLearningRate}, {"seed", seed}, {"model", fn_model_json(shared)},
              {"data", fn_data_json()},
              {"output_dir", std::string(shared ? "fn_shared" : "fn_separate") + "_k16_seed" + std::to_string(seed)}};
}

inline Json lorenz_data_json() {
  return Json{{"system", "lorenz"}, {"config", Json::object()}, {"trials", 48}, {"seed", 2}};
}

inline Json lorenz_recipe() {
  return Json{{"objective", "svo"}, {"K", 4}, {"M", 4}, {"epochs", 20}, {"batch_size", 8},
              {"learning_rate", kFnLearningRate}, {"seed", 0},
              {"model", Json{{"d_x", 10}, {"d_z", 3}, {"d_c", 8}, {"hidden_widths", {32, 32}}}},
              {"data", lorenz_data_json()}, {"output_dir", "lorenz_svo_k4_m4"}};
}

/// A finished training run: configuration, data, per-epoch log and parameters.
struct TrainedRun {
  RunConfig config;
  Dataset data;
  SsmModel model;
  std::vector<EpochRecord> log;
  ParameterStore final_params;
  std::filesystem::path dir;
};

inline std::vector<EpochRecord> read_training_log(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open '" + csv.string() + "'");
  std::string line;
  std::getline(in, line);  // header
  std::vector<EpochRecord> log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream cells(line);
    for (std::string c; std::getline(cells, c, ',');) r.push_back(std::stod(c));
    EpochRecord e;
    e.epoch = static_cast<Index>(r.at(0));
    e.train_objective = r.at(1);
    e.val_objective = r.at(2);
    e.wall_seconds = r.at(3);
    e.param_norm = r.at(4);
    e.grad_norm = r.at(5);
    e.skipped_steps = static_cast<Index>(r.at(6));
    e.failed_sequences = static_cast<Index>(r.at(7));
    log.push_back(e);
  }
  return log;
}

/// Trains `recipe` into the cache, or loads it when a finished run with the same config exists.
inline TrainedRun obtain_run(const Json& recipe, const VerifyOptions& o) {
  RunConfig cfg = run_config_from_json(recipe);
  cfg.output_dir = o.cache_dir / recipe.at("output_dir").get<std::string>();
  cfg.train.threads = o.threads;
  const auto summary = cfg.output_dir / "run.json";
  bool cached = false;
  if (std::filesystem::exists(summary)) {
    try {
      cached = read_json(summary).at("config") == recipe;
    } catch (const std::exception&) {
      cached = false;
    }
  }
  TrainedRun run{cfg, load_data(cfg.data), SsmModel(cfg.model), {}, {}, cfg.output_dir};
  if (cached) {
    detail::say(o, "reusing " + cfg.output_dir.string());
    run.log = read_training_log(cfg.output_dir / "training_log.csv");
    run.final_params = load_checkpoint(cfg.output_dir / "checkpoint_final.json").params;
  } else {
    detail::say(o, "training " + cfg.output_dir.string());
    std::filesystem::remove(summary);
    TrainResult t = execute_run(cfg, recipe, nullptr);
    run.log = t.log;
    run.final_params = std::move(t.final_params);
  }
  return run;
}

inline ParameterStore mid_checkpoint(const TrainedRun& run) {
  return load_checkpoint(run.dir / "checkpoints" / epoch_file(run.config.train.mid_epoch())).params;
}

inline double validation_r2(const TrainedRun& run, Index k, const InferenceSettings& s) {
  const RolloutReport rep = evaluate_rollout(run.model, run.final_params, run.data.subset(run.data.val), k, s, 31);
  return rep.r2_at(k);
}

inline InferenceSettings svo_inference() { return {InferenceMode::Smooth, 8, 8}; }
inline InferenceSettings smc_inference() { return {InferenceMode::Filter, 64, 1}; }

inline CriterionResult criterion_fn_training(const VerifyOptions& o) {
  CriterionResult r{7, "fn_svo_training_r2", false, 0.0, ""};
  std::vector<double> r2;
  for (std::uint64_t seed : {0, 1, 2}) {
    const TrainedRun run = obtain_run(fn_svo_recipe(seed), o);
    r2.push_back(validation_r2(run, 10, svo_inference()));
    detail::say(o, "seed " + std::to_string(seed) + ": validation R2_10 = " + detail::fmt(r2.back()));
  }
  const double mean = (r2[0] + r2[1] + r2[2]) / 3.0;
  r.pass = mean >= 0.85;
  r.detail = "mean validation R2_10 = " + detail::fmt(mean) + " over 3 seeds (needs >= 0.85), " +
             std::to_string(kFnEpochs) + " epochs";
  return r;
}

inline CriterionResult criterion_svo_vs_smc(const VerifyOptions& o) {
  CriterionResult r{8, "svo_vs_filtering_r2", false, 0.0, ""};
  double svo = 0.0;
  double smc = 0.0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const double a = validation_r2(obtain_run(fn_svo_recipe(seed), o), 10, svo_inference());
    const double b = validation_r2(obtain_run(fn_smc_recipe(seed), o), 10, smc_inference());
    detail::say(o, "seed " + std::to_string(seed) + ": SVO R2_10 = " + detail::fmt(a) + ", SMC K=64 R2_10 = " + detail::fmt(b));
    svo += a / 3.0;
    smc += b / 3.0;
  }
  r.pass = svo >= smc - 0.02;
  r.detail = "mean R2_10: SVO K=M=8 " + detail::fmt(svo) + " vs SMC K=64 " + detail::fmt(smc) + " (needs SVO >= SMC - 0.02)";
  return r;
}

/// First epoch at which the trailing 5-epoch mean of `curve` reaches `target` (−1 if never).
inline Index epochs_to_reach(const std::vector<double>& curve, double target, Index window = 5) {
  for (std::size_t e = 0; e < curve.size(); ++e) {
    const std::size_t lo = e + 1 >= static_cast<std::size_t>(window) ? e + 1 - static_cast<std::size_t>(window) : 0;
    double s = 0.0;
    for (std::size_t i = lo; i <= e; ++i) s += curve[i];
    if (s / static_cast<double>(e - lo + 1) >= target) return static_cast<Index>(e);
  }
  return -1;
}

inline CriterionResult criterion_shared_transition(const VerifyOptions& o) {
  CriterionResult r{9, "shared_transition_converges_faster", false, 0.0, ""};
  const Index E = kSharedStudyEpochs;
  std::vector<double> shared(static_cast<std::size_t>(E + 1), 0.0);
  std::vector<double> separate(static_cast<std::size_t>(E + 1), 0.0);
  for (std::uint64_t seed : {0, 1, 2}) {
    for (bool sh : {true, false}) {
      const TrainedRun run = obtain_run(fn_shared_study_recipe(sh, seed), o);
      auto& curve = sh ? shared : separate;
      for (const EpochRecord& e : run.log) curve[static_cast<std::size_t>(e.epoch)] += e.val_objective / 3.0;
    }
  }
  double target = 0.0;
  for (Index e = E - 4; e <= E; ++e) target += separate[static_cast<std::size_t>(e)] / 5.0;
  const Index reach = epochs_to_reach(shared, target);
  r.pass = reach >= 0 && static_cast<double>(reach) <= 0.7 * static_cast<double>(E);
  r.detail = "separate final validation log Z (last-5 mean) " + detail::fmt(target, 6) + "; shared reaches it at epoch " +
             std::to_string(reach) + " of " + std::to_string(E) + " (needs <= " + detail::fmt(0.7 * E, 3) +
             "); shared final " + detail::fmt(shared.back(), 6);
  return r;
}

// ---------------------------------------------------------------------------------------------
// SNR

inline SnrReport fn_snr_report(const VerifyOptions& o) {
  const TrainedRun run = obtain_run(fn_smc_recipe(0), o);
  const ParameterStore mid = mid_checkpoint(run);
  const Matrix& x = run.data.trials[static_cast<std::size_t>(run.data.train.at(0))].observations;
  SnrOptions opt;
  opt.samples = 100;
  opt.seed = 41;
  opt.threads = o.threads;
  return measure_snr(run.model, mid, x,
                     {EstimatorKind::biased(), EstimatorKind::categorical(), EstimatorKind::concrete(0.2),
                      EstimatorKind::concrete_inverse_k()},
                     opt);
}

inline CriterionResult criterion_snr(const VerifyOptions& o) {
  CriterionResult r{6, "snr_scaling_and_ordering", true, 0.0, ""};
  const SnrReport rep = fn_snr_report(o);
  std::ostringstream d;
  for (Group g : kAllGroups) {
    const SnrSeries& b = rep.find("biased", g);
    const SnrSeries& c = rep.find("categorical", g);
    const SnrSeries& c02 = rep.find("concrete:0.2", g);
    const SnrSeries& cik = rep.find("concrete:inverseK", g);
    const bool ok_b = b.slope >= 0.3 && b.slope <= 0.7;
    const bool ok_c = c.points.back().snr_l2 < b.points.back().snr_l2;
    const bool ok_02 = c02.slope >= 0.2 && c02.slope <= 0.8;
    const bool ok_ik = cik.slope < b.slope;
    r.pass = r.pass && ok_b && ok_c && ok_02 && ok_ik;
    d << group_name(g) << ": biased slope " << detail::fmt(b.slope, 3) << (ok_b ? "" : "!") << ", categorical@128 "
      << detail::fmt(c.points.back().snr_l2, 3) << " vs biased " << detail::fmt(b.points.back().snr_l2, 3)
      << (ok_c ? "" : "!") << ", concrete0.2 slope " << detail::fmt(c02.slope, 3) << (ok_02 ? "" : "!")
      << ", concrete1/K slope " << detail::fmt(cik.slope, 3) << (ok_ik ? "" : "!") << "; ";
  }
  for (const SnrSeries& s : rep.series) {
    std::string pts;
    for (const SnrPoint& p : s.points) pts += " " + detail::fmt(p.snr_l2, 3);
    detail::say(o, s.kind + "/" + group_name(s.group) + " slope " + detail::fmt(s.slope, 3) + " snr:" + pts);
  }
  r.detail = d.str();
  return r;
}

// ---------------------------------------------------------------------------------------------
// ELBO versus (K, M) on Lorenz data

inline CriterionResult criterion_elbo_monotone(const VerifyOptions& o) {
  CriterionResult r{10, "lorenz_elbo_increases_with_k_m", true, 0.0, ""};
  const TrainedRun run = obtain_run(lorenz_recipe(), o);
  const Matrix& x = run.data.trials[static_cast<std::size_t>(run.data.val.at(0))].observations;
  const std::vector<Index> grid{2, 8, 32};
  std::vector<detail::MeanSe> stats;
  for (Index k : grid) {
    std::vector<double> v(200);
    parallel_for(200, o.threads, [&](Index i) {
      Rng rng = Rng::stream(43, {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i)});
      ad::Tape tape;
      ModelEval eval(run.model, run.final_params, tape, false);
      v[static_cast<std::size_t>(i)] = run_svo(eval, x, k, k, rng).objective.log_z.scalar();
    });
    stats.push_back(detail::mean_se(v));
    detail::say(o, "K=M=" + std::to_string(k) + ": mean log Z = " + detail::fmt(stats.back().mean, 8) + " ± " +
                       detail::fmt(stats.back().se, 3));
  }
  std::ostringstream d;
  for (std::size_t i = 1; i < stats.size(); ++i) {
    const double se = std::sqrt(stats[i].se * stats[i].se + stats[i - 1].se * stats[i - 1].se);
    const bool ok = stats[i].mean >= stats[i - 1].mean - 2.0 * se;
    r.pass = r.pass && ok;
    d << "(" << grid[i - 1] << "," << grid[i - 1] << ")->(" << grid[i] << "," << grid[i] << "): "
      << detail::fmt(stats[i].mean - stats[i - 1].mean, 4) << " (2SE " << detail::fmt(2.0 * se, 3) << ")"
      << (ok ? "" : "!") << "; ";
  }
  r.detail = d.str();
  return r;
}

// ---------------------------------------------------------------------------------------------
// Property checks

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Upper quantile of the chi-square distribution (Wilson-Hilferty), z the normal quantile.
inline double chi_square_quantile(double dof, double z) {
  const double a = 2.0 / (9.0 * dof);
  const double c = 1.0 - a + z * std::sqrt(a);
  return dof * c * c * c;
}

inline std::vector<PropertyResult> property_checks() {
  std::vector<PropertyResult> out;
  const ToyProblem prob = fn_toy_problem();

  {  // Normalized weights sum to one; ESS in [1, K].
    bool sums = true;
    bool ess = true;
    for (Index K : {1, 3, 16}) {
      for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng = Rng::stream(51, {s, static_cast<std::uint64_t>(K)});
        ad::Tape tape;
        ModelEval eval(prob.model, prob.params, tape, false);
        const SmcResult f = smc_filter(eval, prob.x, K, rng);
        for (const Eigen::VectorXd& w : f.system.weights) {
          sums = sums && std::abs(w.sum() - 1.0) < 1e-12 && (w.array() >= 0.0).all();
          const double e = effective_sample_size(w);
          ess = ess && e >= 1.0 - 1e-12 && e <= static_cast<double>(K) + 1e-9;
        }
      }
    }
    out.push_back({"weight_normalization", sums, "normalized weights sum to 1 within 1e-12"});
    out.push_back({"ess_bounds", ess, "1 <= ESS <= K at every step"});
  }
  {  // Jensen: mean log Ẑ ≤ log mean Ẑ in every replicate set.
    bool ok = true;
    double tightest = std::numeric_limits<double>::infinity();
    for (std::uint64_t set = 0; set < 10; ++set) {
      std::vector<double> lz;
      for (std::uint64_t i = 0; i < 50; ++i) {
        Rng rng = Rng::stream(53, {set, i});
        ad::Tape tape;
        ModelEval eval(prob.model, prob.params, tape, false);
        lz.push_back(smc_filter(eval, prob.x, 4, rng).log_z.scalar());
      }
      const double m = *std::max_element(lz.begin(), lz.end());
      double s = 0.0;
      double mean_log = 0.0;
      for (double v : lz) {
        s += std::exp(v - m);
        mean_log += v / static_cast<double>(lz.size());
      }
      const double log_mean = m + std::log(s / static_cast<double>(lz.size()));
      ok = ok && mean_log <= log_mean + 1e-12;
      tightest = std::min(tightest, log_mean - mean_log);
    }
    out.push_back({"jensen_per_replicate_set", ok, "smallest gap log mean Z - mean log Z = " + detail::fmt(tightest, 3)});
  }
  {  // Concrete draws lie on the simplex.
    bool ok = true;
    Rng rng(55);
    ad::Tape tape;
    for (double lambda : {0.05, 0.2, 1.0, 5.0}) {
      Matrix lw(6, 1);
      for (Index i = 0; i < 6; ++i) lw(i, 0) = 3.0 * rng.normal();
      const ConcreteSample s = concrete_rsample(tape.constant(lw), lambda, rng.gumbel_matrix(200, 6));
      const Matrix& v = s.s.value();
      ok = ok && (v.array() >= 0.0).all() && ((v.rowwise().sum().array() - 1.0).abs() < 1e-12).all();
    }
    out.push_back({"concrete_simplex", ok, "relaxed samples non-negative, rows sum to 1"});
  }
  {  // Categorical frequencies against their probabilities.
    const std::vector<double> w{0.05, 0.1, 0.15, 0.3, 0.4};
    const Index n = 100000;
    std::vector<double> count(w.size(), 0.0);
    Rng rng(57);
    for (Index i = 0; i < n; ++i) count[static_cast<std::size_t>(categorical_sample(w, rng))] += 1.0;
    double chi = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double e = w[k] * static_cast<double>(n);
      chi += (count[k] - e) * (count[k] - e) / e;
    }
    const double crit = chi_square_quantile(static_cast<double>(w.size() - 1), 3.09);  // p = 0.001
    out.push_back({"categorical_chi_square", chi < crit,
                   "chi2 = " + detail::fmt(chi, 4) + " < " + detail::fmt(crit, 4) + " (4 dof, p = 0.001)"});
  }
  {  // RK4 global error shrinks 16x per halving of the step on y' = −y.
    auto err = [](double dt) {
      const Index steps = static_cast<Index>(std::llround(2.0 / dt));
      Eigen::VectorXd y0(1);
      y0 << 1.0;
      const Matrix y = rk4_integrate([](const Eigen::VectorXd& v) { return Eigen::VectorXd(-v); }, y0, dt, steps + 1);
      return std::abs(y(steps, 0) - std::exp(-2.0));
    };
    const double order = std::log2(err(0.1) / err(0.05));
    out.push_back({"rk4_order", order > 3.8 && order < 4.2, "observed order " + detail::fmt(order, 4)});
  }
  {  // R²: perfect prediction gives 1, predicting the mean gives 0.
    Rng rng(59);
    std::vector<Matrix> data{rng.normal_matrix(30, 2), rng.normal_matrix(30, 2)};
    std::vector<std::vector<Matrix>> perfect(2);
    std::vector<std::vector<Matrix>> mean(2);
    for (std::size_t i = 0; i < 2; ++i) {
      for (Index k = 1; k <= 3; ++k) {
        const Matrix target = data[i].bottomRows(30 - k);
        perfect[i].push_back(target);
        mean[i].push_back(target.colwise().mean().replicate(30 - k, 1));
      }
    }
    const RolloutReport a = r_squared(perfect, data, 3);
    const RolloutReport b = r_squared(mean, data, 3);
    bool ok = true;
    for (Index k = 1; k <= 3; ++k) ok = ok && a.r2_at(k) == 1.0 && std::abs(b.r2_at(k)) < 1e-12;
    out.push_back({"r2_trivial_cases", ok, "R2 = 1 for exact predictions, 0 for the mean"});
  }
  {  // Bit-determinism: the same seed gives identical training results.
    FnConfig fc;
    fc.T = 20;
    Dataset ds = simulate_fn(fc, 6, 3);
    ModelConfig mc;
    mc.d_x = 1;
    mc.hidden_widths = {8};
    const SsmModel model(mc);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    tc.seed = 4;
    auto once = [&] {
      Rng rng(9);
      return train(model, model.initialize(rng), ds, tc, {}, nullptr);
    };
    const TrainResult a = once();
    const TrainResult b = once();
    bool ok = a.final_params == b.final_params;
    for (std::size_t i = 0; i < a.log.size(); ++i) ok = ok && a.log[i].val_objective == b.log[i].val_objective;
    out.push_back({"bit_determinism", ok, "two seeded training runs agree bit for bit"});
  }
  return out;
}

inline CriterionResult criterion_properties(const VerifyOptions& o) {
  CriterionResult r{11, "property_suites", true, 0.0, ""};
  int failed = 0;
  const auto checks = property_checks();
  for (const PropertyResult& p : checks) {
    detail::say(o, p.name + ": " + (p.pass ? "pass" : "FAIL") + " (" + p.detail + ")");
    if (!p.pass) {
      r.pass = false;
      ++failed;
      r.detail += p.name + " failed; ";
    }
  }
  r.detail += std::to_string(checks.size() - static_cast<std::size_t>(failed)) + "/" + std::to_string(checks.size()) +
              " properties hold";
  return r;
}

// ---------------------------------------------------------------------------------------------

using CriterionFn = std::function<CriterionResult(const VerifyOptions&)>;

inline const std::vector<std::pair<int, CriterionFn>>& criteria() {
  static const std::vector<std::pair<int, CriterionFn>> all{
      {1, criterion_smc_unbiased},  {2, criterion_svo_unbiased},      {3, criterion_smoother},
      {4, criterion_gradient_exact}, {5, criterion_score_unbiased},    {6, criterion_snr},
      {7, criterion_fn_training},    {8, criterion_svo_vs_smc},        {9, criterion_shared_transition},
      {10, criterion_elbo_monotone}, {11, criterion_properties}};
  return all;
}

/// Runs the selected criteria, printing one line per criterion to `table` as it finishes.
inline std::vector<CriterionResult> run_acceptance(const VerifyOptions& o, std::ostream& table) {
  std::vector<CriterionResult> out;
  for (const auto& [id, fn] : criteria()) {
    if (!o.only.empty() && o.only.count(id) == 0) continue;
    const auto start = std::chrono::steady_clock::now();
    CriterionResult r;
    try {
      r = fn(o);
    } catch (const std::exception& e) {
      r = CriterionResult{id, "criterion_" + std::to_string(id), false, 0.0, std::string("error: ") + e.what()};
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    table << "criterion " << std::setw(2) << r.id << "  " << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  ("
          << detail::fmt(r.seconds, 4) << " s)  " << r.detail << std::endl;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace psvo::acceptance

#endif  // PSVO_VERIFY_HPP
