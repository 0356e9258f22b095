/// @file model.hpp The state-space model p(X, Z) and its forward and backward proposals.
///
/// Generative model:
///   z_1 ~ f_1 = N(ψ_1, Q_1),  z_t ~ f(·|z_{t−1}) = N(ψ(z_{t−1}), Σ),  x_t ~ g(·|z_t) = N(υ(z_t), Γ).
/// Forward proposal: the normalized product f(z_t|z_{t−1})·h(z_t|x_t) with h = N(γ(x_t), Λ)
/// (f_1·h at t = 1). Backward proposal: the normalized product r(z_t|ζ(z_{t+1}))·e(z_t|c_t)
/// where c_t is the reverse-time context of x_{t:T}; the last step uses e alone.

#ifndef PSVO_MODEL_HPP
#define PSVO_MODEL_HPP

#include "psvo/diff.hpp"
#include "psvo/distributions.hpp"
#include "psvo/networks.hpp"
#include "psvo/params.hpp"
#include "psvo/random.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

enum class CovarianceMode { Diagonal, LocallyLinear };

struct ModelConfig {
  Index d_x = 1;
  Index d_z = 2;
  Index d_c = 8;
  std::vector<Index> hidden_widths{32, 32};
  bool share_transition = true;
  CovarianceMode covariance_mode = CovarianceMode::Diagonal;
  double alpha = 1e-1;
  // Initial standard deviations of the trainable diagonal covariances.
  double transition_std = 0.1;
  double initial_std = 1.0;
  double encoder_std = 1.0;
  double backward_std = 1.0;

  void validate() const {
    if (d_x <= 0 || d_z <= 0 || d_c <= 0) throw std::invalid_argument("model config: dimensions must be positive");
    for (Index h : hidden_widths)
      if (h <= 0) throw std::invalid_argument("model config: hidden widths must be positive");
    if (!(alpha >= 0.0)) throw std::invalid_argument("model config: alpha must be non-negative");
    if (!(transition_std > 0.0 && initial_std > 0.0 && encoder_std > 0.0 && backward_std > 0.0)) {
      throw std::invalid_argument("model config: initial standard deviations must be positive");
    }
  }
};

/// Observed sequence with optional ground-truth latents.
struct Trajectory {
  Matrix observations;  // T×d_x
  Matrix latents;       // T×d_z, empty when unknown

  [[nodiscard]] Index length() const { return observations.rows(); }

  void validate() const {
    if (observations.rows() < 2) throw std::invalid_argument("trajectory: need at least 2 time steps");
    if (!observations.allFinite()) throw std::invalid_argument("trajectory: observations contain NaN or inf");
    if (latents.size() != 0 && (latents.rows() != observations.rows() || !latents.allFinite())) {
      throw std::invalid_argument("trajectory: latents misaligned or non-finite");
    }
  }
};

class SsmModel {
 public:
  explicit SsmModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const Index dz = cfg_.d_z;
    const Index dx = cfg_.d_x;
    transition_ = Mlp("transition.psi", dims(dz, dz), Group::Varphi, true);
    emission_ = Mlp("emission.upsilon", dims(dz, dx), Group::Theta);
    encoder_ = Mlp("encoder.gamma", dims(dx, dz), Group::Phi);
    zeta_ = Mlp("backward.zeta", dims(dz, dz), Group::Phi, true);
    context_ = ContextEncoder("backward.chi_cell", dx, cfg_.d_c, {}, Group::Phi);
    context_head_ = Mlp("backward.chi_head", {cfg_.d_c, dz}, Group::Phi);
    if (cfg_.covariance_mode == CovarianceMode::LocallyLinear) {
      transition_cov_ = LocallyLinearCov("transition.cov", dz, cfg_.alpha, cfg_.hidden_widths, Group::Varphi);
    }
    if (!cfg_.share_transition) {
      proposal_transition_ = Mlp("proposal.transition.psi", dims(dz, dz), Group::Phi, true);
      if (cfg_.covariance_mode == CovarianceMode::LocallyLinear) {
        proposal_transition_cov_ =
            LocallyLinearCov("proposal.transition.cov", dz, cfg_.alpha, cfg_.hidden_widths, Group::Phi);
      }
    }
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] bool shared() const { return cfg_.share_transition; }
  [[nodiscard]] bool locally_linear() const { return cfg_.covariance_mode == CovarianceMode::LocallyLinear; }

  [[nodiscard]] const Mlp& transition_net() const { return transition_; }
  [[nodiscard]] const Mlp& proposal_transition_net() const {
    return cfg_.share_transition ? transition_ : proposal_transition_;
  }
  [[nodiscard]] const Mlp& emission_net() const { return emission_; }
  [[nodiscard]] const Mlp& encoder_net() const { return encoder_; }
  [[nodiscard]] const Mlp& zeta_net() const { return zeta_; }
  [[nodiscard]] const ContextEncoder& context_encoder() const { return context_; }
  [[nodiscard]] const Mlp& context_head() const { return context_head_; }
  [[nodiscard]] const LocallyLinearCov& transition_cov() const { return transition_cov_; }
  [[nodiscard]] const LocallyLinearCov& proposal_transition_cov() const {
    return cfg_.share_transition ? transition_cov_ : proposal_transition_cov_;
  }

  /// Prefix of the transition parameters used by the proposal ("transition" when shared).
  [[nodiscard]] std::string proposal_prefix() const {
    return cfg_.share_transition ? "transition" : "proposal.transition";
  }
  [[nodiscard]] std::string proposal_initial_prefix() const {
    return cfg_.share_transition ? "initial" : "proposal.initial";
  }

  /// Fresh parameters. `obs_std` (1×d_x), when given, sets the emission noise to the data scale.
  [[nodiscard]] ParameterStore initialize(Rng& rng, const std::optional<Matrix>& obs_std = std::nullopt) const {
    ParameterStore s;
    const Index dz = cfg_.d_z;
    const Index dx = cfg_.d_x;
    transition_.initialize(s, rng);
    s.add("initial.mean", Group::Varphi, Matrix::Zero(1, dz));
    s.add("initial.log_std", Group::Varphi, Matrix::Constant(1, dz, std::log(cfg_.initial_std)));
    if (locally_linear()) {
      transition_cov_.initialize(s, rng, cfg_.transition_std * cfg_.transition_std);
    } else {
      s.add("transition.log_std", Group::Varphi, Matrix::Constant(1, dz, std::log(cfg_.transition_std)));
    }
    if (!cfg_.share_transition) {
      proposal_transition_.initialize(s, rng);
      s.add("proposal.initial.mean", Group::Phi, Matrix::Zero(1, dz));
      s.add("proposal.initial.log_std", Group::Phi, Matrix::Constant(1, dz, std::log(cfg_.initial_std)));
      if (locally_linear()) {
        proposal_transition_cov_.initialize(s, rng, cfg_.transition_std * cfg_.transition_std);
      } else {
        s.add("proposal.transition.log_std", Group::Phi, Matrix::Constant(1, dz, std::log(cfg_.transition_std)));
      }
    }
    emission_.initialize(s, rng);
    Matrix gamma = Matrix::Zero(1, dx);
    if (obs_std) {
      if (obs_std->cols() != dx) throw std::invalid_argument("initialize: obs_std width mismatch");
      gamma = obs_std->array().max(1e-3).log().matrix();
    }
    s.add("emission.log_std", Group::Theta, gamma);
    encoder_.initialize(s, rng);
    s.add("encoder.log_std", Group::Phi, Matrix::Constant(1, dz, std::log(cfg_.encoder_std)));
    zeta_.initialize(s, rng);
    s.add("backward.r_log_std", Group::Phi, Matrix::Constant(1, dz, std::log(cfg_.backward_std)));
    context_.initialize(s, rng);
    context_head_.initialize(s, rng);
    s.add("backward.e_log_std", Group::Phi, Matrix::Constant(1, dz, std::log(cfg_.backward_std)));
    return s;
  }

 private:
  [[nodiscard]] std::vector<Index> dims(Index in, Index out) const {
    std::vector<Index> d{in};
    d.insert(d.end(), cfg_.hidden_widths.begin(), cfg_.hidden_widths.end());
    d.push_back(out);
    return d;
  }

  ModelConfig cfg_;
  Mlp transition_;
  Mlp proposal_transition_;
  Mlp emission_;
  Mlp encoder_;
  Mlp zeta_;
  ContextEncoder context_;
  Mlp context_head_;
  LocallyLinearCov transition_cov_;
  LocallyLinearCov proposal_transition_cov_;
};

/// A model with its parameters placed on one tape. All densities it hands out are
/// batches with one component per row.
class ModelEval {
 public:
  ModelEval(const SsmModel& model, const ParameterStore& store, ad::Tape& tape, bool trainable = true)
      : model_(&model), params_(store, tape, trainable) {}

  [[nodiscard]] const SsmModel& model() const { return *model_; }
  [[nodiscard]] const Binding& params() const { return params_; }
  [[nodiscard]] ad::Tape& tape() const { return params_.tape(); }
  [[nodiscard]] Index d_z() const { return model_->config().d_z; }
  [[nodiscard]] Index d_x() const { return model_->config().d_x; }
  [[nodiscard]] Var data(const Matrix& m) const { return tape().constant(m); }

  /// Target transition f(·|z_prev); one component per row of z_prev.
  [[nodiscard]] Gaussian transition(Var z_prev) const {
    return transition_from(model_->transition_net(), model_->transition_cov(), "transition", z_prev);
  }

  /// Transition factor of the forward proposal. Same parameters as transition() when shared.
  [[nodiscard]] Gaussian proposal_transition(Var z_prev) const {
    return transition_from(model_->proposal_transition_net(), model_->proposal_transition_cov(),
                           model_->proposal_prefix(), z_prev);
  }

  [[nodiscard]] Gaussian initial(Index n) const { return initial_from("initial", n); }
  [[nodiscard]] Gaussian proposal_initial(Index n) const { return initial_from(model_->proposal_initial_prefix(), n); }

  /// Emission g(·|z); one component per row of z.
  [[nodiscard]] Gaussian emission(Var z) const {
    Var mean = model_->emission_net().forward(params_, z);
    return diag_gaussian(mean, params_["emission.log_std"]);
  }

  /// Encoder h(·|x); one component per row of x.
  [[nodiscard]] Gaussian encoder(Var x) const {
    Var mean = model_->encoder_net().forward(params_, x);
    return diag_gaussian(mean, params_["encoder.log_std"]);
  }

  /// Reverse-time contexts, T×d_c.
  [[nodiscard]] Var contexts(Var x) const { return model_->context_encoder().encode(params_, x); }

  /// e(·|c) replicated to n rows; `context` is 1×d_c.
  [[nodiscard]] Gaussian context_factor(Var context, Index n) const {
    Var mean = model_->context_head().forward(params_, context);
    return diag_gaussian(ad::broadcast(mean, n, d_z()), params_["backward.e_log_std"]);
  }

  /// Backward proposal r(·|ζ(z_next))·e(·|c), normalized; one component per row of z_next.
  [[nodiscard]] Gaussian backward_proposal(Var z_next, Var context) const {
    Var r_mean = model_->zeta_net().forward(params_, z_next);
    Gaussian r = diag_gaussian(r_mean, params_["backward.r_log_std"]);
    return gaussian_product(r, context_factor(context, z_next.rows()));
  }

  /// Forward proposal at one time step, normalized. `z_prev` invalid means t = 1.
  [[nodiscard]] Gaussian forward_proposal(Var z_prev, Var encoder_row, Index n) const {
    Gaussian f = z_prev.valid() ? proposal_transition(z_prev) : proposal_initial(n);
    Gaussian h = diag_gaussian(ad::broadcast(encoder_row, n, d_z()), params_["encoder.log_std"]);
    return gaussian_product(f, h);
  }

 private:
  [[nodiscard]] Gaussian transition_from(const Mlp& net, const LocallyLinearCov& cov, const std::string& prefix,
                                         Var z_prev) const {
    Var mean = net.forward(params_, z_prev);
    if (model_->locally_linear()) return full_gaussian(mean, cov.covariances(params_, z_prev));
    return diag_gaussian(mean, params_[prefix + ".log_std"]);
  }

  [[nodiscard]] Gaussian initial_from(const std::string& prefix, Index n) const {
    return diag_gaussian(ad::broadcast(params_[prefix + ".mean"], n, d_z()),
                         ad::broadcast(params_[prefix + ".log_std"], n, d_z()));
  }

  const SsmModel* model_;
  Binding params_;
};

/// log p(z_{1:T}, x_{1:T}) for N trajectories at once; `z[t]` is N×d_z. Returns N×1.
inline Var joint_log_density(const ModelEval& eval, std::span<const Var> z, const Matrix& x) {
  const auto T = static_cast<Index>(z.size());
  if (T != x.rows()) throw std::invalid_argument("joint_log_density: latent and observation lengths differ");
  if (T < 1) throw std::invalid_argument("joint_log_density: empty trajectory");
  const Index n = z[0].rows();
  Var total = gaussian_log_pdf(eval.initial(n), z[0]);
  for (Index t = 0; t < T; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    if (t > 0) total = ad::add(total, gaussian_log_pdf(eval.transition(z[ti - 1]), z[ti]));
    Var xt = eval.data(x.row(t).replicate(n, 1));
    total = ad::add(total, gaussian_log_pdf(eval.emission(z[ti]), xt));
  }
  return total;
}

/// log of the normalized forward proposal at z_t (1×d_z); `z_prev` invalid for t = 1.
inline Var forward_proposal_density(const ModelEval& eval, Var z_t, Var z_prev, const Matrix& x_t) {
  Var enc = eval.encoder(eval.data(x_t)).mean;
  return gaussian_log_pdf(eval.forward_proposal(z_prev, enc, z_t.rows()), z_t);
}

}  // namespace psvo

#endif  // PSVO_MODEL_HPP
