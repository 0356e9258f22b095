/// @file eval.hpp k-step rollout prediction and the R²_k score.
///
/// A latent estimate ẑ_t is inferred from data, the transition mean ψ is applied k times
/// without data, and the emission mean υ gives x̂_{t+k}. With x̄_k the per-trial mean of
/// x_{k+1:T} (per dimension),
///   MSE_k = Σ (x_{t+k} − x̂_{t+k})²,   R²_k = 1 − MSE_k / Σ (x_{t+k} − x̄_k)²,
/// where both sums run over t, dimensions and trials before the ratio is taken.

#ifndef PSVO_EVAL_HPP
#define PSVO_EVAL_HPP

#include "psvo/diff.hpp"
#include "psvo/model.hpp"
#include "psvo/random.hpp"
#include "psvo/smc.hpp"
#include "psvo/svo.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

enum class InferenceMode { Filter, Smooth };

inline InferenceMode parse_inference_mode(const std::string& s) {
  if (s == "filter") return InferenceMode::Filter;
  if (s == "smooth") return InferenceMode::Smooth;
  throw std::invalid_argument("unknown inference mode '" + s + "' (filter, smooth)");
}

inline const char* inference_mode_name(InferenceMode m) { return m == InferenceMode::Filter ? "filter" : "smooth"; }

struct InferenceSettings {
  InferenceMode mode = InferenceMode::Smooth;
  Index K = 16;
  Index M = 16;  // Smooth only
};

/// Posterior-mean latent estimate per time step (T×d_z).
inline Matrix infer_latents(const SsmModel& model, const ParameterStore& store, const Matrix& x,
                            const InferenceSettings& s, Rng& rng) {
  ad::Tape tape;
  ModelEval eval(model, store, tape, false);
  SmcResult f = smc_filter(eval, x, s.K, rng);
  if (s.mode == InferenceMode::Filter) return filtered_means(f.system);
  BackwardSweep sweep = backward_simulate(eval, f.system, x, s.M, rng);
  return smoothed_means(sweep, svo_objective(eval, sweep, x));
}

/// Deterministic rollout from every row of `z0`: element k−1 of the result holds
/// υ(ψ^k(z0)) for each row, k = 1..k_max.
inline std::vector<Matrix> rollout(const SsmModel& model, const ParameterStore& store, const Matrix& z0, Index k_max) {
  ad::Tape tape;
  Binding params(store, tape, false);
  std::vector<Matrix> out;
  Matrix z = z0;
  for (Index k = 1; k <= k_max; ++k) {
    z = model.transition_net().forward(params, tape.constant(z)).value();
    out.push_back(model.emission_net().forward(params, tape.constant(z)).value());
  }
  return out;
}

/// Predictions for one sequence: element k−1 is (T−k)×d_x, row t holding x̂_{t+k}
/// (aligned with x.bottomRows(T−k)).
inline std::vector<Matrix> k_step_predict(const SsmModel& model, const ParameterStore& store, const Matrix& x,
                                          Index k_max, const InferenceSettings& s, Rng& rng,
                                          Matrix* latents = nullptr) {
  const Index T = x.rows();
  if (k_max < 1) throw std::invalid_argument("k_step_predict: k_max must be at least 1");
  if (k_max >= T) {
    throw std::invalid_argument("k_step_predict: k_max (" + std::to_string(k_max) + ") must be below T (" +
                                std::to_string(T) + ")");
  }
  Matrix z = infer_latents(model, store, x, s, rng);
  if (latents != nullptr) *latents = z;
  std::vector<Matrix> all = rollout(model, store, z, k_max);
  for (Index k = 1; k <= k_max; ++k) {
    Matrix& p = all[static_cast<std::size_t>(k - 1)];
    p = p.topRows(T - k).eval();
  }
  return all;
}

struct RolloutReport {
  std::vector<double> mse;        // Σ squared error, pooled
  std::vector<double> mse_mean;   // mse divided by the number of predicted scalars
  std::vector<double> r2;         // NaN when the baseline denominator is zero
  std::vector<double> baseline;   // pooled Σ (x − x̄_k)²
  std::vector<std::vector<double>> trial_mse;  // [trial][k−1]
  std::vector<std::vector<double>> trial_r2;   // [trial][k−1]

  [[nodiscard]] Index k_max() const { return static_cast<Index>(mse.size()); }
  [[nodiscard]] double r2_at(Index k) const { return r2.at(static_cast<std::size_t>(k - 1)); }
};

/// `predictions[i]` is k_step_predict's output for `data[i]`.
inline RolloutReport r_squared(const std::vector<std::vector<Matrix>>& predictions, const std::vector<Matrix>& data,
                               Index k_max) {
  if (predictions.size() != data.size() || data.empty()) {
    throw std::invalid_argument("r_squared: need one prediction set per sequence");
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  RolloutReport rep;
  rep.trial_mse.assign(data.size(), {});
  rep.trial_r2.assign(data.size(), {});
  for (Index k = 1; k <= k_max; ++k) {
    double err = 0.0;
    double base = 0.0;
    double count = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Matrix& x = data[i];
      if (static_cast<Index>(predictions[i].size()) < k) throw std::invalid_argument("r_squared: missing horizon");
      const Matrix& p = predictions[i][static_cast<std::size_t>(k - 1)];
      const Index n = x.rows() - k;
      if (n < 1 || p.rows() != n || p.cols() != x.cols()) throw std::invalid_argument("r_squared: misaligned predictions");
      const Matrix target = x.bottomRows(n);
      const Eigen::RowVectorXd mean = target.colwise().mean();
      const double e = (target - p).squaredNorm();
      const double b = (target.rowwise() - mean).squaredNorm();
      err += e;
      base += b;
      count += static_cast<double>(target.size());
      rep.trial_mse[i].push_back(e);
      rep.trial_r2[i].push_back(b > 0.0 ? 1.0 - e / b : nan);
    }
    rep.mse.push_back(err);
    rep.mse_mean.push_back(err / count);
    rep.baseline.push_back(base);
    rep.r2.push_back(base > 0.0 ? 1.0 - err / base : nan);
  }
  return rep;
}

/// Predicts every sequence with its own random stream and scores the pooled R²_k.
inline RolloutReport evaluate_rollout(const SsmModel& model, const ParameterStore& store,
                                      const std::vector<Trajectory>& trials, Index k_max, const InferenceSettings& s,
                                      std::uint64_t seed, std::vector<Matrix>* latents = nullptr) {
  std::vector<std::vector<Matrix>> preds;
  std::vector<Matrix> data;
  if (latents != nullptr) latents->clear();
  for (std::size_t i = 0; i < trials.size(); ++i) {
    Rng rng = Rng::stream(seed, {7, i});
    Matrix z;
    preds.push_back(k_step_predict(model, store, trials[i].observations, k_max, s, rng, &z));
    data.push_back(trials[i].observations);
    if (latents != nullptr) latents->push_back(std::move(z));
  }
  return r_squared(preds, data, k_max);
}

}  // namespace psvo

#endif  // PSVO_EVAL_HPP
