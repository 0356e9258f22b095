/// @file enumeration.hpp Exact E[log Ẑ_SMC] for a two-step, two-particle scalar filter.
///
/// The expectation over the filter's randomness is computed by summing over the four
/// ancestor assignments (weighted by their categorical probabilities) and integrating the
/// Gaussian proposal noise with tensor-product Gauss-Hermite quadrature. The model is
/// re-implemented here with plain scalar arithmetic; nothing is shared with the library's
/// density code. Gradients are central differences of the exact expectation.

#ifndef PSVO_ORACLE_ENUMERATION_HPP
#define PSVO_ORACLE_ENUMERATION_HPP

#include "psvo/params.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo::oracle {

/// Nodes and weights for ∫ f(ε) N(ε; 0, 1) dε ≈ Σ w_i f(x_i) (probabilists' Hermite),
/// from the eigen-decomposition of the Jacobi matrix (Golub-Welsch).
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;

  explicit GaussHermite(int order) {
    if (order < 1) throw std::invalid_argument("gauss-hermite: order must be positive");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(order, order);
    for (int i = 1; i < order; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    for (int i = 0; i < order; ++i) {
      nodes.push_back(es.eigenvalues()(i));
      const double v = es.eigenvectors()(0, i);
      weights.push_back(v * v);
    }
  }
};

namespace detail {

/// Scalar feed-forward net read from a parameter store: tanh hidden layers, identity output.
struct ScalarNet {
  std::vector<std::vector<std::vector<double>>> w;  // [layer][in][out]
  std::vector<std::vector<double>> b;               // [layer][out]
  bool residual = false;

  static ScalarNet read(const ParameterStore& s, const std::string& prefix, bool residual) {
    ScalarNet n;
    n.residual = residual;
    for (int l = 0;; ++l) {
      const std::string wn = prefix + ".W" + std::to_string(l);
      if (!s.contains(wn)) break;
      const auto& W = s.value(wn);
      const auto& B = s.value(prefix + ".b" + std::to_string(l));
      std::vector<std::vector<double>> wl(static_cast<std::size_t>(W.rows()), std::vector<double>(static_cast<std::size_t>(W.cols())));
      for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) wl[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = W(i, j);
      std::vector<double> bl(static_cast<std::size_t>(B.cols()));
      for (Eigen::Index j = 0; j < B.cols(); ++j) bl[static_cast<std::size_t>(j)] = B(0, j);
      n.w.push_back(std::move(wl));
      n.b.push_back(std::move(bl));
    }
    if (n.w.empty()) throw std::invalid_argument("enumeration oracle: no network '" + prefix + "'");
    if (n.w.front().size() != 1 || n.b.back().size() != 1) {
      throw std::invalid_argument("enumeration oracle: network '" + prefix + "' is not scalar-to-scalar");
    }
    return n;
  }

  [[nodiscard]] double operator()(double x) const {
    std::vector<double> h{x};
    for (std::size_t l = 0; l < w.size(); ++l) {
      std::vector<double> o = b[l];
      for (std::size_t i = 0; i < h.size(); ++i)
        for (std::size_t j = 0; j < o.size(); ++j) o[j] += h[i] * w[l][i][j];
      if (l + 1 < w.size())
        for (double& v : o) v = std::tanh(v);
      h = std::move(o);
    }
    return residual ? x + h[0] : h[0];
  }
};

inline double normal_log_pdf(double x, double mean, double sd) {
  const double r = (x - mean) / sd;
  return -0.5 * r * r - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

/// Product of two scalar Gaussians, returned as (mean, sd).
inline std::pair<double, double> product(double m1, double s1, double m2, double s2) {
  const double p1 = 1.0 / (s1 * s1);
  const double p2 = 1.0 / (s2 * s2);
  const double var = 1.0 / (p1 + p2);
  return {var * (m1 * p1 + m2 * p2), std::sqrt(var)};
}

inline double lse2(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

struct ScalarModel {
  double mu0, sd0, sd_f, sd_g, sd_h;
  ScalarNet psi, upsilon, gamma;

  static ScalarModel read(const ParameterStore& s) {
    if (s.value("initial.mean").size() != 1) throw std::invalid_argument("enumeration oracle: needs d_z = 1");
    if (s.value("emission.log_std").size() != 1) throw std::invalid_argument("enumeration oracle: needs d_x = 1");
    if (!s.contains("transition.log_std") || s.contains("proposal.transition.psi.W0")) {
      throw std::invalid_argument("enumeration oracle: needs a shared, diagonal transition");
    }
    ScalarModel m;
    m.mu0 = s.value("initial.mean")(0, 0);
    m.sd0 = std::exp(s.value("initial.log_std")(0, 0));
    m.sd_f = std::exp(s.value("transition.log_std")(0, 0));
    m.sd_g = std::exp(s.value("emission.log_std")(0, 0));
    m.sd_h = std::exp(s.value("encoder.log_std")(0, 0));
    m.psi = ScalarNet::read(s, "transition.psi", true);
    m.upsilon = ScalarNet::read(s, "emission.upsilon", false);
    m.gamma = ScalarNet::read(s, "encoder.gamma", false);
    return m;
  }
};

}  // namespace detail

/// E[log Ẑ_SMC] for K = 2, T = 2 (x has 2 rows, 1 column) under multinomial resampling.
inline double expected_log_z(const ParameterStore& store, const Eigen::MatrixXd& x, int order) {
  if (x.rows() != 2 || x.cols() != 1) throw std::invalid_argument("enumeration oracle: instance must be T=2, d_x=1");
  const auto m = detail::ScalarModel::read(store);
  const GaussHermite gh(order);
  const auto n = static_cast<std::size_t>(order);
  const double log2 = std::log(2.0);
  const double h1 = m.gamma(x(0, 0));
  const double h2 = m.gamma(x(1, 0));
  const auto [q1m, q1s] = detail::product(m.mu0, m.sd0, h1, m.sd_h);

  // Step 2 contribution of one particle descending from z_prev, at noise ε.
  auto step2 = [&](double z_prev, double eps) {
    const double f_mean = m.psi(z_prev);
    const auto [qm, qs] = detail::product(f_mean, m.sd_f, h2, m.sd_h);
    const double z = qm + qs * eps;
    return detail::normal_log_pdf(z, f_mean, m.sd_f) + detail::normal_log_pdf(x(1, 0), m.upsilon(z), m.sd_g) -
           detail::normal_log_pdf(z, qm, qs);
  };

  double total = 0.0;
  std::vector<double> lw2a(n * 2);  // [node][parent] log-weight at step 2
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double wij = gh.weights[i] * gh.weights[j];
      std::array<double, 2> z1{q1m + q1s * gh.nodes[i], q1m + q1s * gh.nodes[j]};
      std::array<double, 2> lw1{};
      for (int k = 0; k < 2; ++k) {
        lw1[static_cast<std::size_t>(k)] = detail::normal_log_pdf(z1[static_cast<std::size_t>(k)], m.mu0, m.sd0) +
                                          detail::normal_log_pdf(x(0, 0), m.upsilon(z1[static_cast<std::size_t>(k)]), m.sd_g) -
                                          detail::normal_log_pdf(z1[static_cast<std::size_t>(k)], q1m, q1s);
      }
      const double l1 = detail::lse2(lw1[0], lw1[1]);
      const std::array<double, 2> wbar{std::exp(lw1[0] - l1), std::exp(lw1[1] - l1)};
      for (std::size_t r = 0; r < n; ++r)
        for (int p = 0; p < 2; ++p) lw2a[r * 2 + static_cast<std::size_t>(p)] = step2(z1[static_cast<std::size_t>(p)], gh.nodes[r]);
      double inner = 0.0;
      for (int a0 = 0; a0 < 2; ++a0) {
        for (int a1 = 0; a1 < 2; ++a1) {
          const double pa = wbar[static_cast<std::size_t>(a0)] * wbar[static_cast<std::size_t>(a1)];
          double e2 = 0.0;
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t s = 0; s < n; ++s) {
              e2 += gh.weights[r] * gh.weights[s] *
                    detail::lse2(lw2a[r * 2 + static_cast<std::size_t>(a0)], lw2a[s * 2 + static_cast<std::size_t>(a1)]);
            }
          inner += pa * e2;
        }
      }
      total += wij * (l1 - log2 + inner - log2);
    }
  }
  return total;
}

/// Central-difference gradient of any function of the parameters, every scalar entry.
template <typename F>
GradientSet central_difference_gradient(const ParameterStore& store, F&& f, double h) {
  GradientSet out;
  ParameterStore work = store;
  for (const auto& [name, p] : store.entries()) {
    Eigen::MatrixXd g(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      Eigen::MatrixXd v = p.value;
      v.data()[i] = p.value.data()[i] + h;
      work.set(name, v);
      const double up = f(work);
      v.data()[i] = p.value.data()[i] - h;
      work.set(name, v);
      const double down = f(work);
      g.data()[i] = (up - down) / (2.0 * h);
      work.set(name, p.value);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

/// |a − b| / max(|a|, |b|, floor): relative error that stays meaningful near zero.
inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace psvo::oracle

#endif  // PSVO_ORACLE_ENUMERATION_HPP
