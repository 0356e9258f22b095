/// @file svo.hpp Backward simulation with continuous subparticles and the smoothed objective.
///
/// For each of K trajectories, at each time step (last to first) M subparticles are drawn
/// from a continuous backward proposal, weighted against the filter's predictive mixture,
/// and one is selected. The selected subweight enters the proposal factor
///   Ω_t^k = M · ω̄_{t|T}^{k,b} · q(z̃_t^k | z̃_{t+1}^k, x_{1:T}),
/// and the objective is log (1/K) Σ_k p(z̃^k, x) / Π_t Ω_t^k.

#ifndef PSVO_SVO_HPP
#define PSVO_SVO_HPP

#include "psvo/diff.hpp"
#include "psvo/distributions.hpp"
#include "psvo/model.hpp"
#include "psvo/random.hpp"
#include "psvo/smc.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace psvo {

/// Random draws of one backward sweep (0-based time index).
struct SvoRandomness {
  std::vector<Matrix> subparticle_noise;   // per t: (K·M)×d_z
  std::vector<std::vector<Index>> indices;  // per t: K selected subparticle indices
};

struct BackwardSweep {
  std::vector<Var> trajectories;               // z̃_t, K×d_z
  std::vector<std::vector<Index>> indices;     // b_t^k in [0, M)
  std::vector<Matrix> subweights;              // ω̄_{t|T}, K×M, rows sum to one
  std::vector<Var> log_omega;                  // log Ω_t^k, K×1
  std::vector<Matrix> subparticles;            // (K·M)×d_z primal, row k·M + m
  Var log_q;                                   // Σ_t log Ω_t^k, K×1
  Index K = 0;
  Index M = 0;
  long long transition_evaluations = 0;        // transition densities evaluated in the sweep
};

struct SvoObjective {
  Var log_z;      // log Ẑ_SVO, 1×1
  Var log_ratio;  // log p(z̃^k, x) − log q(z̃^k | x), K×1
};

/// Number of transition-density evaluations one sweep performs:
/// (T−1)·K·M·K for the predictive mixtures plus (T−1)·K·M for the forward factor.
inline long long expected_transition_evaluations(Index T, Index K, Index M) {
  return static_cast<long long>(T - 1) * K * M * K + static_cast<long long>(T - 1) * K * M;
}

namespace detail {

inline std::vector<Index> repeat_index(Index K, Index M) {
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(K * M));
  for (Index k = 0; k < K; ++k)
    for (Index m = 0; m < M; ++m) out.push_back(k);
  return out;
}

}  // namespace detail

inline BackwardSweep backward_simulate(const ModelEval& eval, const ParticleSystem& filter, const Matrix& x,
                                       Index M, Rng& rng, SvoRandomness* record = nullptr,
                                       const SvoRandomness* replay = nullptr) {
  const Index T = x.rows();
  const Index K = filter.K;
  const Index KM = K * M;
  const Index dz = eval.d_z();
  if (M < 1) throw std::invalid_argument("backward_simulate: M must be at least 1");
  if (K < 1 || filter.length() != T) throw std::invalid_argument("backward_simulate: filter output does not match data");
  const double log_m = std::log(static_cast<double>(M));
  if (record != nullptr) *record = SvoRandomness{};

  BackwardSweep sweep;
  sweep.K = K;
  sweep.M = M;
  sweep.trajectories.resize(static_cast<std::size_t>(T));
  sweep.indices.resize(static_cast<std::size_t>(T));
  sweep.subweights.resize(static_cast<std::size_t>(T));
  sweep.log_omega.resize(static_cast<std::size_t>(T));
  sweep.subparticles.resize(static_cast<std::size_t>(T));

  Var contexts = eval.contexts(eval.data(x));
  const std::vector<Index> expand = detail::repeat_index(K, M);

  for (Index t = T; t-- > 0;) {
    const auto ti = static_cast<std::size_t>(t);
    // Proposal for the M subparticles of every trajectory. The conditioning state is
    // detached: reverse-time dynamics of a contracting system expand, and carrying the
    // pathwise derivative through T backward steps overflows on long sequences.
    Gaussian q = t == T - 1 ? eval.context_factor(ad::row(contexts, t), KM)
                            : repeat_each(eval.backward_proposal(ad::stop_gradient(sweep.trajectories[ti + 1]),
                                                                 ad::row(contexts, t)),
                                          M);
    Matrix eps;
    if (replay != nullptr) {
      eps = replay->subparticle_noise.at(ti);
    } else {
      eps = rng.normal_matrix(KM, dz);
      if (record != nullptr) record->subparticle_noise.push_back(eps);
    }
    Var zs = gaussian_rsample(q, eps);
    Var log_q = gaussian_log_pdf(q, zs);

    // Predictive term: Σ_j w̄_{t−1}^j f(z̃|z_{t−1}^j), or f_1 at the first step.
    Var predictive;
    if (t == 0) {
      predictive = gaussian_log_pdf(eval.initial(KM), zs);
    } else {
      Gaussian f = eval.transition(filter.particles[ti - 1]);
      Var cross = gaussian_cross_log_pdf(f, zs);  // KM×K
      sweep.transition_evaluations += static_cast<long long>(KM) * K;
      Var lw = ad::broadcast(ad::transpose(filter.log_normalized[ti - 1]), KM, K);
      predictive = ad::logsumexp_rows(ad::add(cross, lw));
    }
    Var log_sub = ad::add(predictive, gaussian_log_pdf(eval.emission(zs), eval.data(x.row(t).replicate(KM, 1))));
    if (t < T - 1) {
      Var next = ad::gather_rows(sweep.trajectories[ti + 1], expand);
      log_sub = ad::add(log_sub, gaussian_log_pdf(eval.transition(zs), next));
      sweep.transition_evaluations += KM;
    }
    log_sub = ad::sub(log_sub, log_q);

    Var log_sub_km = ad::reshape(log_sub, K, M);
    Var lse = ad::logsumexp_rows(log_sub_km);
    for (Index k = 0; k < K; ++k) {
      if (!std::isfinite(lse.value()(k, 0))) {
        std::ostringstream msg;
        msg << "backward_simulate: all " << M << " subweights vanish at t=" << (t + 1) << ", k=" << k
            << " (log predictive " << predictive.value().middleRows(k * M, M).maxCoeff() << ", log q "
            << log_q.value().middleRows(k * M, M).maxCoeff() << ")";
        throw NumericalError(msg.str());
      }
    }
    Var log_norm = ad::sub(log_sub_km, ad::broadcast(lse, K, M));
    const Matrix w = log_norm.value().array().exp().matrix();

    std::vector<Index> b(static_cast<std::size_t>(K));
    if (replay != nullptr) {
      b = replay->indices.at(ti);
    } else {
      for (Index k = 0; k < K; ++k) {
        const Eigen::RowVectorXd wk = w.row(k);
        b[static_cast<std::size_t>(k)] = categorical_sample(std::span<const double>(wk.data(), wk.size()), rng);
      }
      if (record != nullptr) record->indices.push_back(b);
    }
    std::vector<Index> selected(static_cast<std::size_t>(K));
    for (Index k = 0; k < K; ++k) selected[static_cast<std::size_t>(k)] = k * M + b[static_cast<std::size_t>(k)];

    sweep.trajectories[ti] = ad::gather_rows(zs, selected);
    sweep.log_omega[ti] =
        ad::add_scalar(ad::add(ad::pick_cols(log_norm, b), ad::gather_rows(log_q, selected)), log_m);
    sweep.indices[ti] = std::move(b);
    sweep.subweights[ti] = w;
    sweep.subparticles[ti] = zs.value();
  }
  if (record != nullptr) {
    std::reverse(record->subparticle_noise.begin(), record->subparticle_noise.end());
    std::reverse(record->indices.begin(), record->indices.end());
  }
  sweep.log_q = ad::row_sum(ad::concat_cols(sweep.log_omega));
  return sweep;
}

inline SvoObjective svo_objective(const ModelEval& eval, const BackwardSweep& sweep, const Matrix& x) {
  Var joint = joint_log_density(eval, sweep.trajectories, x);
  Var ratio = ad::sub(joint, sweep.log_q);
  Var log_z = ad::add_scalar(ad::logsumexp(ratio), -std::log(static_cast<double>(sweep.K)));
  return SvoObjective{log_z, ratio};
}

/// Self-normalized trajectory mean per time step (T×d_z), weights ∝ p/q.
inline Matrix smoothed_means(const BackwardSweep& sweep, const SvoObjective& obj) {
  const Eigen::VectorXd w = normalize_log_weights(obj.log_ratio.value().col(0));
  const auto T = static_cast<Index>(sweep.trajectories.size());
  Matrix out(T, sweep.trajectories.front().cols());
  for (Index t = 0; t < T; ++t) out.row(t) = w.transpose() * sweep.trajectories[static_cast<std::size_t>(t)].value();
  return out;
}

/// Mean effective sample size of the subweights at each time step (over trajectories).
inline std::vector<double> subweight_ess(const BackwardSweep& sweep) {
  std::vector<double> out;
  for (const Matrix& w : sweep.subweights) {
    double s = 0.0;
    for (Index k = 0; k < w.rows(); ++k) s += 1.0 / w.row(k).squaredNorm();
    out.push_back(s / static_cast<double>(w.rows()));
  }
  return out;
}

/// Forward filter followed by a backward sweep on the same tape.
struct SvoRun {
  SmcResult filter;
  BackwardSweep sweep;
  SvoObjective objective;
};

inline SvoRun run_svo(const ModelEval& eval, const Matrix& x, Index K, Index M, Rng& rng) {
  SvoRun run{smc_filter(eval, x, K, rng), {}, {}};
  run.sweep = backward_simulate(eval, run.filter.system, x, M, rng);
  run.objective = svo_objective(eval, run.sweep, x);
  return run;
}

}  // namespace psvo

#endif  // PSVO_SVO_HPP
