/// @file train.hpp Adam and the training loop for the filtering and smoothing objectives.

#ifndef PSVO_TRAIN_HPP
#define PSVO_TRAIN_HPP

#include "psvo/diff.hpp"
#include "psvo/grad.hpp"
#include "psvo/model.hpp"
#include "psvo/parallel.hpp"
#include "psvo/params.hpp"
#include "psvo/random.hpp"
#include "psvo/smc.hpp"
#include "psvo/svo.hpp"
#include "psvo/systems.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

// ---------------------------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.lr > 0.0) || !(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0) ||
        !(cfg_.eps > 0.0)) {
      throw std::invalid_argument("adam: invalid hyperparameters");
    }
  }

  /// One descent step on `grads` (gradient of a loss). Gradients must cover every parameter.
  /// A non-finite gradient skips the whole step: returns false and names the parameter in `bad`.
  bool step(ParameterStore& store, const GradientSet& grads, std::string* bad = nullptr) {
    for (const auto& [name, p] : store.entries()) {
      auto it = grads.find(name);
      if (it == grads.end()) throw std::invalid_argument("adam: no gradient for parameter '" + name + "'");
      if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
        throw std::invalid_argument("adam: gradient shape mismatch for '" + name + "'");
      }
      if (!it->second.allFinite()) {
        if (bad != nullptr) *bad = name;
        return false;
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : store.entries()) {
      const Matrix& g = grads.at(name);
      auto [mi, fresh] = m_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
      auto [vi, _] = v_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
      mi->second = cfg_.beta1 * mi->second + (1.0 - cfg_.beta1) * g;
      vi->second = cfg_.beta2 * vi->second + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      p.value.array() -= cfg_.lr * (mi->second.array() / c1) / ((vi->second.array() / c2).sqrt() + cfg_.eps);
    }
    return true;
  }

  [[nodiscard]] long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
};

// ---------------------------------------------------------------------------------------------
// Objectives

enum class ObjectiveKind { Smc, Svo };

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "smc") return ObjectiveKind::Smc;
  if (s == "svo") return ObjectiveKind::Svo;
  throw std::invalid_argument("unknown objective '" + s + "' (smc, svo)");
}

inline const char* objective_name(ObjectiveKind o) { return o == ObjectiveKind::Smc ? "smc" : "svo"; }

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::Svo;
  Index K = 8;
  Index M = 8;                                       // Svo only
  EstimatorKind estimator = EstimatorKind::biased();  // Smc only

  void validate() const {
    if (K < 1) throw std::invalid_argument("objective: K must be positive");
    if (kind == ObjectiveKind::Svo && M < 1) throw std::invalid_argument("objective: svo needs M >= 1");
  }
};

/// Objective value on one sequence without gradients.
inline double evaluate_objective(const SsmModel& model, const ParameterStore& store, const Matrix& x,
                                 const ObjectiveSpec& spec, Rng& rng) {
  ad::Tape tape;
  ModelEval eval(model, store, tape, false);
  SmcResult f = smc_filter(eval, x, spec.K, rng);
  if (spec.kind == ObjectiveKind::Smc) return f.log_z.scalar();
  BackwardSweep sweep = backward_simulate(eval, f.system, x, spec.M, rng);
  return svo_objective(eval, sweep, x).log_z.scalar();
}

/// Objective value and its gradient on one sequence. SVO gradients are pathwise; SMC
/// gradients use the configured estimator.
inline GradientSample objective_gradient(const SsmModel& model, const ParameterStore& store, const Matrix& x,
                                         const ObjectiveSpec& spec, Rng& rng) {
  if (spec.kind == ObjectiveKind::Smc) return estimate_gradient(model, store, x, spec.K, spec.estimator, rng);
  ad::Tape tape;
  ModelEval eval(model, store, tape);
  SmcResult f = smc_filter(eval, x, spec.K, rng);
  BackwardSweep sweep = backward_simulate(eval, f.system, x, spec.M, rng);
  SvoObjective obj = svo_objective(eval, sweep, x);
  GradientSample out;
  out.log_z = obj.log_z.scalar();
  out.gradients = eval.params().gradients(tape.backward(obj.log_z));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  ObjectiveSpec objective;
  Index epochs = 300;
  Index batch_size = 8;
  AdamConfig adam;
  double clip_norm = 10.0;  // global gradient norm; <= 0 disables
  std::uint64_t seed = 0;
  int threads = 1;
  Index checkpoint_every = 0;  // 0: only the mid-training and final snapshots

  void validate() const {
    objective.validate();
    if (epochs < 0) throw std::invalid_argument("train: epochs must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
    if (threads < 1) throw std::invalid_argument("train: threads must be positive");
    if (checkpoint_every < 0) throw std::invalid_argument("train: checkpoint_every must be non-negative");
  }

  [[nodiscard]] Index mid_epoch() const { return epochs / 2; }
};

struct EpochRecord {
  Index epoch = 0;
  double train_objective = std::numeric_limits<double>::quiet_NaN();  // mean per sequence over the epoch
  double val_objective = std::numeric_limits<double>::quiet_NaN();    // mean per sequence
  double wall_seconds = 0.0;
  double param_norm = 0.0;
  double grad_norm = 0.0;  // mean pre-clipping global norm over the epoch's steps
  Index skipped_steps = 0;
  Index failed_sequences = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;  // epoch 0 (initial parameters) then one row per epoch
  ParameterStore final_params;
  std::map<Index, ParameterStore> snapshots;  // epoch → parameters (mid, cadence, final)
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double mean_objective(const SsmModel& model, const ParameterStore& store, const std::vector<Trajectory>& seqs,
                             const ObjectiveSpec& spec, std::uint64_t seed, int threads, Index* failures = nullptr) {
  if (seqs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> values(seqs.size(), std::numeric_limits<double>::quiet_NaN());
  parallel_for(static_cast<Index>(seqs.size()), threads, [&](Index i) {
    Rng rng = Rng::stream(seed, {11, static_cast<std::uint64_t>(i)});
    try {
      values[static_cast<std::size_t>(i)] =
          evaluate_objective(model, store, seqs[static_cast<std::size_t>(i)].observations, spec, rng);
    } catch (const NumericalError&) {
    }
  });
  double s = 0.0;
  Index n = 0;
  for (double v : values) {
    if (std::isfinite(v)) {
      s += v;
      ++n;
    }
  }
  if (failures != nullptr) *failures = static_cast<Index>(values.size()) - n;
  return n > 0 ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

using EpochCallback = std::function<void(const EpochRecord&, const ParameterStore&)>;

/// Maximizes the objective averaged over the training split. Sequence i of epoch e uses
/// its own stream (seed, e, i) and batch gradients are summed in index order, so results
/// do not depend on `threads`. Validation uses fixed streams across epochs.
inline TrainResult train(const SsmModel& model, ParameterStore params, const Dataset& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}, std::ostream* log = &std::cerr) {
  cfg.validate();
  data.validate();
  if (data.d_x() != model.config().d_x) {
    throw std::invalid_argument("train: data has d_x=" + std::to_string(data.d_x()) + " but the model expects " +
                                std::to_string(model.config().d_x));
  }
  if (data.train.empty()) throw std::invalid_argument("train: empty training split");
  const std::vector<Trajectory> train_seqs = data.subset(data.train);
  const std::vector<Trajectory> val_seqs = data.subset(data.val);
  const std::uint64_t val_seed = Rng::stream(cfg.seed, {99}).next();

  TrainResult result;
  Adam adam(cfg.adam);
  auto clock = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock).count(); };

  EpochRecord initial;
  initial.val_objective = mean_objective(model, params, val_seqs, cfg.objective, val_seed, cfg.threads);
  initial.param_norm = params.norm();
  result.log.push_back(initial);
  if (on_epoch) on_epoch(initial, params);
  if (cfg.epochs == 0) result.snapshots.emplace(0, params);

  const auto n = static_cast<Index>(train_seqs.size());
  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Shuffle the training order.
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng::stream(cfg.seed, {5, static_cast<std::uint64_t>(epoch)});
    for (Index i = n - 1; i > 0; --i) {
      const auto j = static_cast<Index>(shuffle.uniform() * static_cast<double>(i + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(std::min(j, i))]);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    double obj_sum = 0.0;
    Index obj_count = 0;
    double grad_norm_sum = 0.0;
    Index steps = 0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index b = std::min(cfg.batch_size, n - start);
      std::vector<GradientSample> samples(static_cast<std::size_t>(b));
      std::vector<int> ok(static_cast<std::size_t>(b), 0);
      parallel_for(b, cfg.threads, [&](Index i) {
        const Index seq = order[static_cast<std::size_t>(start + i)];
        Rng rng = Rng::stream(cfg.seed, {6, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(seq)});
        try {
          samples[static_cast<std::size_t>(i)] = objective_gradient(
              model, params, train_seqs[static_cast<std::size_t>(seq)].observations, cfg.objective, rng);
          ok[static_cast<std::size_t>(i)] = std::isfinite(samples[static_cast<std::size_t>(i)].log_z) ? 1 : 0;
        } catch (const NumericalError& e) {
          if (log != nullptr) *log << "warning: epoch " << epoch << ", sequence " << seq << ": " << e.what() << "\n";
        }
      });
      // Loss gradient: negative mean objective over the usable sequences of the batch.
      GradientSet loss;
      for (const auto& [name, p] : params.entries()) loss.emplace(name, Matrix::Zero(p.value.rows(), p.value.cols()));
      Index used = 0;
      for (Index i = 0; i < b; ++i) {
        if (!ok[static_cast<std::size_t>(i)]) {
          ++rec.failed_sequences;
          continue;
        }
        const GradientSample& s = samples[static_cast<std::size_t>(i)];
        obj_sum += s.log_z;
        ++obj_count;
        ++used;
        for (auto& [name, g] : loss) g -= s.gradients.at(name);
      }
      if (used == 0) {
        ++rec.skipped_steps;
        continue;
      }
      double sq = 0.0;
      for (auto& [name, g] : loss) {
        g /= static_cast<double>(used);
        sq += g.squaredNorm();
      }
      const double norm = std::sqrt(sq);
      if (std::isfinite(norm)) {
        grad_norm_sum += norm;
        ++steps;
        if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
          for (auto& [name, g] : loss) g *= cfg.clip_norm / norm;
        }
      }
      std::string bad;
      if (!adam.step(params, loss, &bad)) {
        ++rec.skipped_steps;
        if (log != nullptr) *log << "warning: epoch " << epoch << ": non-finite gradient for '" << bad << "', step skipped\n";
      }
    }
    if (obj_count == 0) {
      throw TrainingAborted("train: objective was NaN or failed for every sequence in epoch " + std::to_string(epoch) +
                            " (" + std::to_string(rec.failed_sequences) + " failures, parameter norm " +
                            std::to_string(params.norm()) + ")");
    }
    rec.train_objective = obj_sum / static_cast<double>(obj_count);
    rec.val_objective = mean_objective(model, params, val_seqs, cfg.objective, val_seed, cfg.threads);
    rec.grad_norm = steps > 0 ? grad_norm_sum / static_cast<double>(steps) : 0.0;
    rec.param_norm = params.norm();
    rec.wall_seconds = elapsed();
    result.log.push_back(rec);
    if (epoch == cfg.mid_epoch() || epoch == cfg.epochs ||
        (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)) {
      result.snapshots.emplace(epoch, params);
    }
    if (on_epoch) on_epoch(rec, params);
  }
  result.final_params = std::move(params);
  return result;
}

}  // namespace psvo

#endif  // PSVO_TRAIN_HPP
