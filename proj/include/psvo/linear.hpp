/// @file linear.hpp Linear-Gaussian instances expressed as an SsmModel.
///
/// With no hidden layers the transition net is z + zW + b and the emission net is zW + b,
/// so a linear-Gaussian system with diagonal noise maps exactly onto the model's
/// parameters. Proposal parameters are derived from the system too (see embed_linear);
/// the estimators are unbiased for any proposal, but a badly matched one makes the
/// reference checks needlessly noisy.

#ifndef PSVO_LINEAR_HPP
#define PSVO_LINEAR_HPP

#include "psvo/model.hpp"
#include "psvo/oracle/kalman.hpp"
#include "psvo/random.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace psvo {

struct LinearInstance {
  oracle::Lgssm system;
  Matrix observations;  // T×d_x
  Matrix latents;       // T×d_z
};

/// Random stable system with diagonal noise, d_x = d_z, and one simulated sequence.
inline LinearInstance make_linear_instance(std::uint64_t seed, Index d_z, Index T) {
  if (d_z < 1 || T < 2) throw std::invalid_argument("make_linear_instance: need d_z >= 1 and T >= 2");
  Rng rng(seed);
  oracle::Lgssm s;
  // A = U·diag(s)·Vᵀ with singular values in [0.6, 0.95]: stable and well conditioned.
  Matrix g(d_z, d_z);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::VectorXd sv(d_z);
  for (Index i = 0; i < d_z; ++i) sv(i) = rng.uniform(0.6, 0.95) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  s.A = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  s.C = Matrix(d_z, d_z);
  for (Index i = 0; i < s.C.size(); ++i) s.C.data()[i] = rng.uniform(-1.0, 1.0);
  s.C *= 0.5;
  s.C.diagonal().array() += 1.0;
  s.Q = Matrix::Zero(d_z, d_z);
  s.R = Matrix::Zero(d_z, d_z);
  s.P0 = Matrix::Zero(d_z, d_z);
  for (Index i = 0; i < d_z; ++i) {
    s.Q(i, i) = rng.uniform(0.2, 0.6);
    s.R(i, i) = rng.uniform(0.8, 1.5);
    s.P0(i, i) = rng.uniform(0.5, 1.5);
  }
  s.m0 = Eigen::VectorXd(d_z);
  for (Index i = 0; i < d_z; ++i) s.m0(i) = rng.uniform(-1.0, 1.0);
  auto [z, x] = oracle::lgssm_sample(s, T, [&] { return rng.normal(); });
  return LinearInstance{std::move(s), std::move(x), std::move(z)};
}

inline ModelConfig linear_model_config(Index d_z, Index d_x) {
  ModelConfig cfg;
  cfg.d_z = d_z;
  cfg.d_x = d_x;
  cfg.d_c = 4;
  cfg.hidden_widths = {};
  return cfg;
}

/// Parameters making `model` (built from linear_model_config) equal to `s`.
/// Requires diagonal Q, R and P0.
inline ParameterStore embed_linear(const SsmModel& model, const oracle::Lgssm& s, Rng& rng) {
  const Index dz = s.d_z();
  if (!model.config().hidden_widths.empty() || model.config().d_z != dz || model.config().d_x != s.d_x()) {
    throw std::invalid_argument("embed_linear: model is not a linear model of matching size");
  }
  auto is_diag = [](const Matrix& m) { return (m - Matrix(m.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0; };
  if (!is_diag(s.Q) || !is_diag(s.R) || !is_diag(s.P0)) throw std::invalid_argument("embed_linear: noise must be diagonal");
  ParameterStore p = model.initialize(rng);
  // Row convention: next = z (I + W) + b, so W = Aᵀ − I.
  p.set("transition.psi.W0", s.A.transpose() - Matrix::Identity(dz, dz));
  p.set("transition.psi.b0", Matrix::Zero(1, dz));
  p.set("transition.log_std", (0.5 * s.Q.diagonal().array().log()).matrix().transpose());
  p.set("initial.mean", s.m0.transpose());
  p.set("initial.log_std", (0.5 * s.P0.diagonal().array().log()).matrix().transpose());
  p.set("emission.upsilon.W0", s.C.transpose());
  p.set("emission.upsilon.b0", Matrix::Zero(1, s.d_x()));
  p.set("emission.log_std", (0.5 * s.R.diagonal().array().log()).matrix().transpose());
  // Proposals built from the system so that importance weights have finite variance:
  // h inverts the emission, r inverts the transition, e is wide. Each is somewhat wider
  // than the conditional it stands in for.
  const Matrix c_inv = s.C.inverse();
  const Matrix a_inv = s.A.inverse();
  const Matrix enc_cov = c_inv * s.R * c_inv.transpose();
  const Matrix r_cov = a_inv * s.Q * a_inv.transpose();
  p.set("encoder.gamma.W0", c_inv.transpose());
  p.set("encoder.gamma.b0", Matrix::Zero(1, dz));
  p.set("encoder.log_std", (0.5 * enc_cov.diagonal().array().log() + std::log(1.3)).matrix().transpose());
  p.set("backward.zeta.W0", a_inv.transpose() - Matrix::Identity(dz, dz));
  p.set("backward.zeta.b0", Matrix::Zero(1, dz));
  p.set("backward.r_log_std", (0.5 * r_cov.diagonal().array().log() + std::log(1.3)).matrix().transpose());
  p.set("backward.chi_head.W0", 0.2 * p.value("backward.chi_head.W0"));
  p.set("backward.e_log_std", Matrix::Constant(1, dz, std::log(3.0)));
  return p;
}

}  // namespace psvo

#endif  // PSVO_LINEAR_HPP
