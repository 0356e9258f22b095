/// @file smc.hpp Filtering sequential Monte Carlo with multinomial ancestor resampling.

#ifndef PSVO_SMC_HPP
#define PSVO_SMC_HPP

#include "psvo/diff.hpp"
#include "psvo/distributions.hpp"
#include "psvo/model.hpp"
#include "psvo/random.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace psvo {

enum class ResampleMode { Categorical, Concrete, None };

struct ResampleSpec {
  ResampleMode mode = ResampleMode::Categorical;
  double temperature = 0.2;  // Concrete only
};

/// Every random draw of one filter run. Recording then replaying reproduces a run
/// exactly at different parameter values (ancestor indices included).
struct SmcRandomness {
  std::vector<Matrix> proposal_noise;         // per t: K×d_z
  std::vector<std::vector<Index>> ancestors;  // per t ≥ 2: K indices
  std::vector<Matrix> gumbel;                 // per t ≥ 2 (Concrete): K×K
};

/// Particles, weights and ancestors of one filter run (0-based time index).
struct ParticleSystem {
  std::vector<Var> particles;                 // z_t, K×d_z
  std::vector<Var> ancestor_states;           // resampled z_{t−1} entering step t (t ≥ 1)
  std::vector<Var> log_weights;               // log w_t, K×1
  std::vector<Var> log_normalized;            // log w̄_t, K×1
  std::vector<Eigen::VectorXd> weights;       // w̄_t (primal)
  std::vector<std::vector<Index>> ancestors;  // ancestors[t] = a_{t−1} for t ≥ 1; empty at t = 0
  std::vector<ConcreteSample> relaxed;        // Concrete mode, t ≥ 1
  std::vector<double> log_z_steps;            // log Ẑ_t
  Index K = 0;

  [[nodiscard]] Index length() const { return static_cast<Index>(particles.size()); }
};

struct SmcResult {
  ParticleSystem system;
  Var log_z;  // log Ẑ_SMC, 1×1
};

/// 1 / Σ w̄²; in [1, K] for normalized weights.
inline double effective_sample_size(const Eigen::Ref<const Eigen::VectorXd>& normalized) {
  return 1.0 / normalized.squaredNorm();
}

/// Runs the filter. Resampling happens at every step. In Concrete mode the ancestor
/// state entering step t is the convex combination Σ_j s_j z_{t−1}^j of a relaxed
/// one-hot draw. In None mode particles are not resampled; the stored log-weights
/// carry log(K·w̄_{t−1}) so that log Ẑ_t = logsumexp(log w_t) − log K still holds.
inline SmcResult smc_filter(const ModelEval& eval, const Matrix& x, Index K, Rng& rng,
                            const ResampleSpec& resample = {}, SmcRandomness* record = nullptr,
                            const SmcRandomness* replay = nullptr) {
  const Index T = x.rows();
  const Index dz = eval.d_z();
  if (K < 1) throw std::invalid_argument("smc_filter: K must be at least 1");
  if (T < 2) throw std::invalid_argument("smc_filter: need at least 2 time steps");
  if (x.cols() != eval.d_x()) throw std::invalid_argument("smc_filter: observation width mismatch");
  if (resample.mode == ResampleMode::Concrete && !(resample.temperature > 0.0)) {
    throw std::invalid_argument("smc_filter: Concrete temperature must be positive");
  }
  const double log_k = std::log(static_cast<double>(K));

  Var enc_means = eval.encoder(eval.data(x)).mean;  // T×d_z
  SmcResult out;
  ParticleSystem& ps = out.system;
  ps.K = K;
  if (record != nullptr) *record = SmcRandomness{};

  auto noise = [&](Index t) -> Matrix {
    if (replay != nullptr) return replay->proposal_noise.at(static_cast<std::size_t>(t));
    Matrix e = rng.normal_matrix(K, dz);
    if (record != nullptr) record->proposal_noise.push_back(e);
    return e;
  };

  std::vector<Var> log_z_terms;
  for (Index t = 0; t < T; ++t) {
    Var z_prev;
    Var extra_log_weight;
    std::vector<Index> anc;
    if (t > 0) {
      const Var prev = ps.particles.back();
      const Eigen::VectorXd& wbar = ps.weights.back();
      switch (resample.mode) {
        case ResampleMode::Categorical: {
          if (replay != nullptr) {
            anc = replay->ancestors.at(static_cast<std::size_t>(t - 1));
          } else {
            anc.resize(static_cast<std::size_t>(K));
            for (auto& a : anc) a = categorical_sample(std::span<const double>(wbar.data(), wbar.size()), rng);
          }
          z_prev = ad::gather_rows(prev, anc);
          break;
        }
        case ResampleMode::Concrete: {
          Matrix g;
          if (replay != nullptr) {
            g = replay->gumbel.at(static_cast<std::size_t>(t - 1));
          } else {
            g = rng.gumbel_matrix(K, K);
          }
          if (record != nullptr) record->gumbel.push_back(g);
          ConcreteSample s = concrete_rsample(ps.log_weights.back(), resample.temperature, g);
          anc.resize(static_cast<std::size_t>(K));
          for (Index k = 0; k < K; ++k) s.s.value().row(k).maxCoeff(&anc[static_cast<std::size_t>(k)]);
          z_prev = ad::matmul(s.s, prev);
          ps.relaxed.push_back(s);
          break;
        }
        case ResampleMode::None: {
          anc.resize(static_cast<std::size_t>(K));
          for (Index k = 0; k < K; ++k) anc[static_cast<std::size_t>(k)] = k;
          z_prev = prev;
          extra_log_weight = ad::add_scalar(ps.log_normalized.back(), log_k);
          break;
        }
      }
      if (record != nullptr) record->ancestors.push_back(anc);
      ps.ancestor_states.push_back(z_prev);
    }

    Var enc_row = ad::row(enc_means, t);
    Gaussian target_f = t == 0 ? eval.initial(K) : eval.transition(z_prev);
    Gaussian proposal_f = t == 0 ? eval.proposal_initial(K)
                                 : (eval.model().shared() ? target_f : eval.proposal_transition(z_prev));
    Gaussian h = diag_gaussian(ad::broadcast(enc_row, K, dz), eval.params()["encoder.log_std"]);
    Gaussian q = gaussian_product(proposal_f, h);
    Var z = gaussian_rsample(q, noise(t));

    Var xt = eval.data(x.row(t).replicate(K, 1));
    Var log_w = ad::sub(ad::add(gaussian_log_pdf(target_f, z), gaussian_log_pdf(eval.emission(z), xt)),
                        gaussian_log_pdf(q, z));
    if (extra_log_weight.valid()) log_w = ad::add(log_w, extra_log_weight);

    Var lse = ad::logsumexp(log_w);
    if (!std::isfinite(lse.scalar())) {
      std::ostringstream msg;
      msg << "smc_filter: all particle weights underflowed at t=" << (t + 1) << " (max log-weight "
          << log_w.value().maxCoeff() << ", K=" << K << ")";
      throw NumericalError(msg.str());
    }
    Var log_norm = ad::sub(log_w, ad::broadcast(lse, K, 1));
    ps.particles.push_back(z);
    ps.log_weights.push_back(log_w);
    ps.log_normalized.push_back(log_norm);
    ps.weights.push_back(log_norm.value().col(0).array().exp().matrix());
    ps.ancestors.push_back(std::move(anc));
    ps.log_z_steps.push_back(lse.scalar() - log_k);
    log_z_terms.push_back(ad::add_scalar(lse, -log_k));
  }
  out.log_z = ad::sum(ad::concat_rows(log_z_terms));
  return out;
}

/// Weighted particle mean per time step (T×d_z).
inline Matrix filtered_means(const ParticleSystem& ps) {
  const Index T = ps.length();
  Matrix out(T, ps.particles.front().cols());
  for (Index t = 0; t < T; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    out.row(t) = ps.weights[ti].transpose() * ps.particles[ti].value();
  }
  return out;
}

}  // namespace psvo

#endif  // PSVO_SMC_HPP
