/// @file distributions.hpp Gaussian, Categorical and Concrete distributions on the tape.

#ifndef PSVO_DISTRIBUTIONS_HPP
#define PSVO_DISTRIBUTIONS_HPP

#include "psvo/diff.hpp"
#include "psvo/random.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// A batch of N independent Gaussians, one per row.
///
/// Diagonal form: `mean` and `log_std` are N×d. Full form: `cov` holds N symmetric
/// positive-definite d×d matrices and `log_std` is unused.
struct Gaussian {
  Var mean;
  Var log_std;
  std::vector<Var> cov;

  [[nodiscard]] bool full() const { return !cov.empty(); }
  [[nodiscard]] Index size() const { return mean.rows(); }
  [[nodiscard]] Index dim() const { return mean.cols(); }
};

inline Gaussian diag_gaussian(Var mean, Var log_std) {
  if (log_std.rows() != mean.rows() || log_std.cols() != mean.cols()) {
    log_std = ad::broadcast(log_std, mean.rows(), mean.cols());
  }
  return Gaussian{mean, log_std, {}};
}

inline Gaussian full_gaussian(Var mean, std::vector<Var> cov) {
  if (static_cast<Index>(cov.size()) != mean.rows()) {
    throw std::invalid_argument("full_gaussian: need one covariance per row");
  }
  for (const Var& c : cov) {
    if (c.rows() != mean.cols() || c.cols() != mean.cols()) {
      throw std::invalid_argument("full_gaussian: covariance shape mismatch");
    }
    if ((c.value() - c.value().transpose()).cwiseAbs().maxCoeff() > 1e-10) {
      throw std::invalid_argument("full_gaussian: covariance is not symmetric");
    }
  }
  return Gaussian{mean, Var{}, std::move(cov)};
}

/// Repeats rows: component i of the result is component rows[i] of `g`.
inline Gaussian select_rows(const Gaussian& g, const std::vector<Index>& rows) {
  Gaussian out;
  out.mean = ad::gather_rows(g.mean, rows);
  if (g.full()) {
    out.cov.reserve(rows.size());
    for (Index r : rows) out.cov.push_back(g.cov[static_cast<std::size_t>(r)]);
  } else {
    out.log_std = ad::gather_rows(g.log_std, rows);
  }
  return out;
}

/// Each component repeated `times` times consecutively.
inline Gaussian repeat_each(const Gaussian& g, Index times) {
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(g.size() * times));
  for (Index i = 0; i < g.size(); ++i)
    for (Index m = 0; m < times; ++m) rows.push_back(i);
  return select_rows(g, rows);
}

/// Reparameterized draw: mean + std ⊙ noise (diagonal) or mean + L·noise (full).
inline Var gaussian_rsample(const Gaussian& g, const Matrix& noise) {
  if (noise.rows() != g.size() || noise.cols() != g.dim()) {
    throw std::invalid_argument("gaussian_rsample: noise is " + std::to_string(noise.rows()) + "x" +
                                std::to_string(noise.cols()) + ", expected " + std::to_string(g.size()) + "x" +
                                std::to_string(g.dim()));
  }
  ad::Tape& tape = *g.mean.tape();
  Var eps = tape.constant(noise);
  if (!g.full()) return ad::add(g.mean, ad::mul(ad::exp(g.log_std), eps));
  std::vector<Var> rows;
  rows.reserve(g.cov.size());
  for (Index i = 0; i < g.size(); ++i) {
    Var l = ad::cholesky(g.cov[static_cast<std::size_t>(i)], "sampling covariance");
    rows.push_back(ad::transpose(ad::matmul(l, ad::transpose(ad::row(eps, i)))));
  }
  return ad::add(g.mean, ad::concat_rows(rows));
}

/// Log-density of row i of x under component i; returns N×1.
inline Var gaussian_log_pdf(const Gaussian& g, Var x) {
  if (x.rows() != g.size() || x.cols() != g.dim()) throw std::invalid_argument("gaussian_log_pdf: shape mismatch");
  if (!g.full()) return ad::diag_gaussian_log_pdf_rows(x, g.mean, g.log_std);
  std::vector<Var> out;
  out.reserve(g.cov.size());
  for (Index i = 0; i < g.size(); ++i) {
    out.push_back(ad::full_gaussian_log_pdf(ad::row(x, i), ad::row(g.mean, i), g.cov[static_cast<std::size_t>(i)]));
  }
  return ad::concat_rows(out);
}

/// Log-density of every row of x under every component; returns x.rows() × N.
/// Diagonal components must share one log_std row.
inline Var gaussian_cross_log_pdf(const Gaussian& g, Var x) {
  if (x.cols() != g.dim()) throw std::invalid_argument("gaussian_cross_log_pdf: dimension mismatch");
  if (!g.full()) return ad::pairwise_diag_gaussian_log_pdf(x, g.mean, ad::row(g.log_std, 0));
  std::vector<Var> cols;
  cols.reserve(g.cov.size());
  for (Index j = 0; j < g.size(); ++j) {
    cols.push_back(ad::full_gaussian_log_pdf(x, ad::row(g.mean, j), g.cov[static_cast<std::size_t>(j)]));
  }
  return ad::concat_cols(cols);
}

/// Normalized product of two Gaussian densities, row by row. `b` must be diagonal.
/// Precisions add; the mean is the precision-weighted average.
inline Gaussian gaussian_product(const Gaussian& a, const Gaussian& b) {
  if (b.full()) throw std::invalid_argument("gaussian_product: second factor must be diagonal");
  if (a.size() != b.size() || a.dim() != b.dim()) throw std::invalid_argument("gaussian_product: shape mismatch");
  Var prec_b = ad::exp(ad::scalar_mul(-2.0, b.log_std));
  if (!a.full()) {
    Var prec_a = ad::exp(ad::scalar_mul(-2.0, a.log_std));
    Var prec = ad::add(prec_a, prec_b);
    Var mean = ad::div(ad::add(ad::mul(a.mean, prec_a), ad::mul(b.mean, prec_b)), prec);
    Var log_std = ad::scalar_mul(-0.5, ad::log(prec));
    return Gaussian{mean, log_std, {}};
  }
  std::vector<Var> means;
  std::vector<Var> covs;
  for (Index i = 0; i < a.size(); ++i) {
    Var pa = ad::inverse(a.cov[static_cast<std::size_t>(i)]);
    Var pb_row = ad::row(prec_b, i);
    Var p = ad::add(pa, ad::diag_embed(pb_row));
    Var s = ad::inverse(p);
    // Symmetrize to remove round-off asymmetry from the two inversions.
    s = ad::scalar_mul(0.5, ad::add(s, ad::transpose(s)));
    Var eta = ad::add(ad::matmul(ad::row(a.mean, i), pa), ad::mul(ad::row(b.mean, i), pb_row));
    means.push_back(ad::matmul(eta, s));
    covs.push_back(s);
  }
  return Gaussian{ad::concat_rows(means), Var{}, std::move(covs)};
}

// ---------------------------------------------------------------------------------------------
// Categorical

/// Inverse-CDF draw from unnormalized non-negative weights using a single uniform.
inline Index categorical_sample(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("categorical_sample: invalid weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("categorical_sample: all weights are zero");
  const double u = rng.uniform() * total;
  double cum = 0.0;
  Index last_positive = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] > 0.0) last_positive = static_cast<Index>(k);
    cum += weights[k];
    if (u < cum && weights[k] > 0.0) return static_cast<Index>(k);
  }
  return last_positive;
}

/// Normalized probabilities from log-weights (max-shifted).
inline Eigen::VectorXd normalize_log_weights(const Eigen::Ref<const Eigen::VectorXd>& log_w) {
  const double m = log_w.maxCoeff();
  if (!std::isfinite(m)) throw NumericalError("normalize_log_weights: no finite weight");
  Eigen::VectorXd w = (log_w.array() - m).exp();
  return w / w.sum();
}

// ---------------------------------------------------------------------------------------------
// Concrete (Gumbel-Softmax)

inline constexpr double kLogWeightFloor = -745.0;

/// A batch of relaxed one-hot vectors, one per row, together with their logs.
struct ConcreteSample {
  Var s;
  Var log_s;
  double temperature = 1.0;
};

/// Row r of the result is softmax((log w + g_r) / λ) where g_r is row r of `gumbel`.
/// `log_weights` is K×1 (unnormalized); `gumbel` is N×K.
inline ConcreteSample concrete_rsample(Var log_weights, double temperature, const Matrix& gumbel) {
  if (!(temperature > 0.0)) throw std::invalid_argument("concrete_rsample: temperature must be positive");
  const Index k = log_weights.rows();
  if (log_weights.cols() != 1 || gumbel.cols() != k) throw std::invalid_argument("concrete_rsample: shape mismatch");
  ad::Tape& tape = *log_weights.tape();
  const Index n = gumbel.rows();
  Var lw = ad::clamp_min(ad::transpose(log_weights), kLogWeightFloor);
  Var logits = ad::scalar_mul(1.0 / temperature, ad::add(ad::broadcast(lw, n, k), tape.constant(gumbel)));
  Var log_s = ad::sub(logits, ad::broadcast(ad::logsumexp_rows(logits), n, k));
  return ConcreteSample{ad::exp(log_s), log_s, temperature};
}

/// Log-density of each relaxed sample (row) under Concrete(w, λ); returns N×1:
///   log (K−1)! + (K−1) log λ + Σ_k (log w_k − (λ+1) log s_k) − K log Σ_k w_k s_k^{−λ}.
inline Var concrete_log_pdf(const ConcreteSample& sample, Var log_weights) {
  const double lambda = sample.temperature;
  if (!(lambda > 0.0)) throw std::invalid_argument("concrete_log_pdf: temperature must be positive");
  const Index k = log_weights.rows();
  const Index n = sample.log_s.rows();
  if (sample.log_s.cols() != k) throw std::invalid_argument("concrete_log_pdf: shape mismatch");
  if (!sample.log_s.value().allFinite()) throw std::invalid_argument("concrete_log_pdf: sample has a zero component");
  const double kk = static_cast<double>(k);
  const double c = std::lgamma(kk) + (kk - 1.0) * std::log(lambda);
  Var lw = ad::broadcast(ad::clamp_min(ad::transpose(log_weights), kLogWeightFloor), n, k);
  Var first = ad::row_sum(ad::sub(lw, ad::scalar_mul(lambda + 1.0, sample.log_s)));
  Var second = ad::logsumexp_rows(ad::sub(lw, ad::scalar_mul(lambda, sample.log_s)));
  return ad::add_scalar(ad::sub(first, ad::scalar_mul(kk, second)), c);
}

}  // namespace psvo

#endif  // PSVO_DISTRIBUTIONS_HPP
