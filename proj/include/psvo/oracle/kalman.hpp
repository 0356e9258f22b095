/// @file kalman.hpp Exact inference for linear-Gaussian state-space models.
///
///   z_1 ~ N(m0, P0),  z_t = A z_{t−1} + N(0, Q),  x_t = C z_t + N(0, R).
///
/// Used only as a reference for the Monte Carlo estimators; it shares no density code
/// with the rest of the library.

#ifndef PSVO_ORACLE_KALMAN_HPP
#define PSVO_ORACLE_KALMAN_HPP

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace psvo::oracle {

struct Lgssm {
  Eigen::MatrixXd A;   // d_z×d_z
  Eigen::MatrixXd Q;   // d_z×d_z
  Eigen::MatrixXd C;   // d_x×d_z
  Eigen::MatrixXd R;   // d_x×d_x
  Eigen::VectorXd m0;  // d_z
  Eigen::MatrixXd P0;  // d_z×d_z

  [[nodiscard]] Eigen::Index d_z() const { return A.rows(); }
  [[nodiscard]] Eigen::Index d_x() const { return C.rows(); }
};

struct KalmanResult {
  double log_marginal = 0.0;
  std::vector<Eigen::VectorXd> filtered_means;
  std::vector<Eigen::MatrixXd> filtered_covs;
  std::vector<Eigen::VectorXd> predicted_means;
  std::vector<Eigen::MatrixXd> predicted_covs;
};

namespace detail {

inline double mvn_log_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw std::runtime_error("kalman: innovation covariance is not positive definite");
  const Eigen::VectorXd r = x - mean;
  const Eigen::VectorXd y = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + logdet + y.squaredNorm());
}

}  // namespace detail

/// Kalman filter; log p(x_{1:T}) by the prediction-error decomposition.
/// `x` is T×d_x (one observation per row).
inline KalmanResult kalman_filter(const Lgssm& m, const Eigen::MatrixXd& x) {
  KalmanResult out;
  Eigen::VectorXd mean = m.m0;
  Eigen::MatrixXd cov = m.P0;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    if (t > 0) {
      mean = m.A * mean;
      cov = m.A * cov * m.A.transpose() + m.Q;
    }
    out.predicted_means.push_back(mean);
    out.predicted_covs.push_back(cov);
    const Eigen::VectorXd xt = x.row(t).transpose();
    const Eigen::MatrixXd S = m.C * cov * m.C.transpose() + m.R;
    out.log_marginal += detail::mvn_log_pdf(xt, m.C * mean, S);
    const Eigen::MatrixXd gain = cov * m.C.transpose() * S.inverse();
    mean = mean + gain * (xt - m.C * mean);
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(m.d_z(), m.d_z());
    const Eigen::MatrixXd IKC = I - gain * m.C;
    cov = IKC * cov * IKC.transpose() + gain * m.R * gain.transpose();  // Joseph form
    out.filtered_means.push_back(mean);
    out.filtered_covs.push_back(cov);
  }
  return out;
}

inline double kalman_log_marginal(const Lgssm& m, const Eigen::MatrixXd& x) {
  return kalman_filter(m, x).log_marginal;
}

struct SmootherResult {
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covs;
  KalmanResult filter;
};

/// Rauch-Tung-Striebel smoother.
inline SmootherResult kalman_smoother(const Lgssm& m, const Eigen::MatrixXd& x) {
  SmootherResult out;
  out.filter = kalman_filter(m, x);
  const auto T = static_cast<std::size_t>(x.rows());
  out.means = out.filter.filtered_means;
  out.covs = out.filter.filtered_covs;
  for (std::size_t t = T - 1; t-- > 0;) {
    const Eigen::MatrixXd& Pf = out.filter.filtered_covs[t];
    const Eigen::MatrixXd& Pp = out.filter.predicted_covs[t + 1];
    const Eigen::MatrixXd J = Pf * m.A.transpose() * Pp.inverse();
    out.means[t] = out.filter.filtered_means[t] + J * (out.means[t + 1] - out.filter.predicted_means[t + 1]);
    out.covs[t] = Pf + J * (out.covs[t + 1] - Pp) * J.transpose();
  }
  return out;
}

/// log p(x_{1:T}) from the dense (T·d_x)-dimensional Gaussian of all observations.
inline double dense_log_marginal(const Lgssm& m, const Eigen::MatrixXd& x) {
  const Eigen::Index T = x.rows();
  const Eigen::Index dz = m.d_z();
  const Eigen::Index dx = m.d_x();
  // Latent means and cross-covariances Cov(z_s, z_t).
  std::vector<Eigen::VectorXd> mu(static_cast<std::size_t>(T));
  std::vector<Eigen::MatrixXd> var(static_cast<std::size_t>(T));
  mu[0] = m.m0;
  var[0] = m.P0;
  for (Eigen::Index t = 1; t < T; ++t) {
    mu[static_cast<std::size_t>(t)] = m.A * mu[static_cast<std::size_t>(t - 1)];
    var[static_cast<std::size_t>(t)] = m.A * var[static_cast<std::size_t>(t - 1)] * m.A.transpose() + m.Q;
  }
  Eigen::VectorXd mean(T * dx);
  Eigen::MatrixXd cov(T * dx, T * dx);
  for (Eigen::Index s = 0; s < T; ++s) {
    mean.segment(s * dx, dx) = m.C * mu[static_cast<std::size_t>(s)];
    for (Eigen::Index t = s; t < T; ++t) {
      // Cov(z_t, z_s) = A^{t−s} Var(z_s) for t ≥ s.
      Eigen::MatrixXd Ak = Eigen::MatrixXd::Identity(dz, dz);
      for (Eigen::Index k = s; k < t; ++k) Ak = m.A * Ak;
      Eigen::MatrixXd block = m.C * Ak * var[static_cast<std::size_t>(s)] * m.C.transpose();
      if (s == t) block += m.R;
      cov.block(t * dx, s * dx, dx, dx) = block;
      cov.block(s * dx, t * dx, dx, dx) = block.transpose();
    }
  }
  Eigen::VectorXd flat(T * dx);
  for (Eigen::Index t = 0; t < T; ++t) flat.segment(t * dx, dx) = x.row(t).transpose();
  return detail::mvn_log_pdf(flat, mean, cov);
}

/// log p(z_{1:T}, x_{1:T}) evaluated directly.
inline double lgssm_joint_log_density(const Lgssm& m, const Eigen::MatrixXd& z, const Eigen::MatrixXd& x) {
  double total = detail::mvn_log_pdf(z.row(0).transpose(), m.m0, m.P0);
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    if (t > 0) total += detail::mvn_log_pdf(z.row(t).transpose(), m.A * z.row(t - 1).transpose(), m.Q);
    total += detail::mvn_log_pdf(x.row(t).transpose(), m.C * z.row(t).transpose(), m.R);
  }
  return total;
}

/// Draws (z, x) from the model; `normal` returns standard normal variates.
template <typename NormalFn>
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> lgssm_sample(const Lgssm& m, Eigen::Index T, NormalFn&& normal) {
  auto draw = [&](const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    Eigen::VectorXd e(mean.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = normal();
    return Eigen::VectorXd(mean + Eigen::LLT<Eigen::MatrixXd>(cov).matrixL() * e);
  };
  Eigen::MatrixXd z(T, m.d_z());
  Eigen::MatrixXd x(T, m.d_x());
  Eigen::VectorXd zt = draw(m.m0, m.P0);
  for (Eigen::Index t = 0; t < T; ++t) {
    if (t > 0) zt = draw(m.A * zt, m.Q);
    z.row(t) = zt.transpose();
    x.row(t) = draw(m.C * zt, m.R).transpose();
  }
  return {z, x};
}

}  // namespace psvo::oracle

#endif  // PSVO_ORACLE_KALMAN_HPP
