/// @file grad.hpp Gradient estimators for the filtering objective and the SNR harness.
///
///   Biased:               ∇ log Ẑ, ancestor indices treated as constants.
///   UnbiasedCategorical:  ∇ log Ẑ + log Ẑ · ∇ Σ_{t,k} log w̄_{t−1}^{a_t^k}
///   Concrete(λ):          relaxed resampling, ∇ log Ẑ + log Ẑ · ∇ Σ_{t,k} log Concrete(s_t^k; w_{t−1}, λ)
/// The score terms are built as a surrogate stop(L)·S so a single backward pass yields the
/// whole estimate.

#ifndef PSVO_GRAD_HPP
#define PSVO_GRAD_HPP

#include "psvo/diff.hpp"
#include "psvo/model.hpp"
#include "psvo/params.hpp"
#include "psvo/parallel.hpp"
#include "psvo/random.hpp"
#include "psvo/smc.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

struct EstimatorKind {
  enum class Type { Biased, UnbiasedCategorical, Concrete };
  Type type = Type::Biased;
  double temperature = 0.2;  // Concrete with a fixed temperature
  bool inverse_k = false;    // Concrete with λ = 1/K

  static EstimatorKind biased() { return {}; }
  static EstimatorKind categorical() { return {Type::UnbiasedCategorical, 0.2, false}; }
  static EstimatorKind concrete(double lambda) {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("concrete temperature must be positive");
    return {Type::Concrete, lambda, false};
  }
  static EstimatorKind concrete_inverse_k() { return {Type::Concrete, 0.0, true}; }

  [[nodiscard]] double temperature_for(Index K) const {
    return inverse_k ? 1.0 / static_cast<double>(K) : temperature;
  }

  [[nodiscard]] std::string name() const {
    switch (type) {
      case Type::Biased: return "biased";
      case Type::UnbiasedCategorical: return "categorical";
      case Type::Concrete: {
        if (inverse_k) return "concrete:inverseK";
        std::ostringstream s;
        s << "concrete:" << temperature;
        return s.str();
      }
    }
    return "?";
  }

  /// Accepts "biased", "categorical", "concrete" (λ = 0.2), "concrete:<λ>", "concrete:inverseK".
  static EstimatorKind parse(const std::string& s) {
    if (s == "biased") return biased();
    if (s == "categorical") return categorical();
    if (s == "concrete") return concrete(0.2);
    if (s == "concrete:inverseK") return concrete_inverse_k();
    if (s.rfind("concrete:", 0) == 0) {
      const std::string v = s.substr(9);
      std::size_t used = 0;
      double lambda = std::numeric_limits<double>::quiet_NaN();
      try {
        lambda = std::stod(v, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != v.size() || v.empty()) throw std::invalid_argument("bad concrete temperature '" + v + "'");
      return concrete(lambda);
    }
    throw std::invalid_argument("unknown estimator '" + s + "' (biased, categorical, concrete[:λ|:inverseK])");
  }
};

struct GradientSample {
  double log_z = 0.0;        // L = log Ẑ_SMC
  double score = 0.0;        // value of the score sum (0 for Biased)
  GradientSet gradients;
};

/// One gradient sample of the filtering objective on a single sequence.
/// `record`/`replay` freeze every random draw (noise, ancestors, Gumbel variates).
inline GradientSample estimate_gradient(const SsmModel& model, const ParameterStore& store, const Matrix& x, Index K,
                                        const EstimatorKind& kind, Rng& rng, SmcRandomness* record = nullptr,
                                        const SmcRandomness* replay = nullptr) {
  ad::Tape tape;
  ModelEval eval(model, store, tape);
  ResampleSpec rs;
  if (kind.type == EstimatorKind::Type::Concrete) {
    const double lambda = kind.temperature_for(K);
    if (!(lambda > 0.0)) throw std::invalid_argument("estimate_gradient: invalid concrete temperature");
    rs = {ResampleMode::Concrete, lambda};
  }
  SmcResult res = smc_filter(eval, x, K, rng, rs, record, replay);
  const ParticleSystem& ps = res.system;
  const double L = res.log_z.scalar();

  Var objective = res.log_z;
  std::vector<Var> terms;
  if (kind.type == EstimatorKind::Type::UnbiasedCategorical) {
    for (Index t = 1; t < ps.length(); ++t) {
      const auto ti = static_cast<std::size_t>(t);
      terms.push_back(ad::sum(ad::gather_rows(ps.log_normalized[ti - 1], ps.ancestors[ti])));
    }
  } else if (kind.type == EstimatorKind::Type::Concrete) {
    for (std::size_t i = 0; i < ps.relaxed.size(); ++i) {
      terms.push_back(ad::sum(concrete_log_pdf(ps.relaxed[i], ps.log_weights[i])));
    }
  }
  GradientSample out;
  out.log_z = L;
  if (!terms.empty()) {
    Var score = ad::sum(ad::concat_rows(terms));
    out.score = score.scalar();
    objective = ad::add(objective, ad::scalar_mul(L, score));
  }
  out.gradients = eval.params().gradients(tape.backward(objective));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Signal-to-noise ratio

struct SnrPoint {
  Index K = 0;
  Index N = 0;
  Eigen::VectorXd mean;
  Eigen::VectorXd std;     // sample standard deviation (N−1)
  double snr_l2 = 0.0;     // ‖(|mean_i| / std_i)_i‖₂ over elements with std_i > 0
  double snr_agg = 0.0;    // ‖mean‖₂ / ‖std‖₂
  bool degenerate = false; // every element has zero variance; both SNRs are +inf
};

struct SnrSeries {
  std::string kind;
  Group group = Group::Theta;
  std::vector<SnrPoint> points;
  double slope = std::numeric_limits<double>::quiet_NaN();      // OLS of log snr_l2 on log K
  double slope_agg = std::numeric_limits<double>::quiet_NaN();  // same for snr_agg
};

struct SnrReport {
  std::vector<SnrSeries> series;

  [[nodiscard]] const SnrSeries& find(const std::string& kind, Group g) const {
    for (const SnrSeries& s : series)
      if (s.kind == kind && s.group == g) return s;
    throw std::out_of_range("snr report has no series " + kind + "/" + group_name(g));
  }
};

/// Elementwise statistics of N gradient samples (columns of `samples`).
inline SnrPoint snr_statistics(const Matrix& samples, Index K) {
  const Index n = samples.cols();
  if (n < 2) throw std::invalid_argument("snr_statistics: need at least 2 samples");
  SnrPoint p;
  p.K = K;
  p.N = n;
  p.mean = samples.rowwise().mean();
  const Matrix centered = samples.colwise() - p.mean;
  p.std = (centered.rowwise().squaredNorm() / static_cast<double>(n - 1)).cwiseSqrt();
  double acc = 0.0;
  Index used = 0;
  for (Index i = 0; i < p.mean.size(); ++i) {
    if (p.std(i) > 0.0) {
      const double r = std::abs(p.mean(i)) / p.std(i);
      acc += r * r;
      ++used;
    }
  }
  p.degenerate = used == 0;
  const double inf = std::numeric_limits<double>::infinity();
  p.snr_l2 = p.degenerate ? inf : std::sqrt(acc);
  const double sn = p.std.norm();
  p.snr_agg = sn > 0.0 ? p.mean.norm() / sn : inf;
  return p;
}

/// Ordinary least-squares slope of y on x over finite, positive-SNR points.
inline double log_log_slope(const std::vector<double>& k, const std::vector<double>& snr) {
  std::vector<double> lx;
  std::vector<double> ly;
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (std::isfinite(snr[i]) && snr[i] > 0.0) {
      lx.push_back(std::log(k[i]));
      ly.push_back(std::log(snr[i]));
    }
  }
  if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(lx.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
}

struct SnrOptions {
  std::vector<Index> k_grid{4, 8, 16, 32, 64, 128};
  Index samples = 100;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Draws `samples` gradient samples per (kind, K) on the sequence `x` at fixed parameters.
/// Sample i of (kind, K) uses its own random stream, so results do not depend on threads.
inline SnrReport measure_snr(const SsmModel& model, const ParameterStore& store, const Matrix& x,
                             const std::vector<EstimatorKind>& kinds, const SnrOptions& opt) {
  if (opt.samples < 2) throw std::invalid_argument("measure_snr: need at least 2 samples");
  SnrReport report;
  for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
    const EstimatorKind& kind = kinds[ki];
    std::map<Group, SnrSeries> by_group;
    for (Group g : kAllGroups) by_group[g] = SnrSeries{kind.name(), g, {}, 0.0, 0.0};
    for (Index K : opt.k_grid) {
      std::vector<GradientSet> draws(static_cast<std::size_t>(opt.samples));
      parallel_for(opt.samples, opt.threads, [&](Index i) {
        Rng rng = Rng::stream(opt.seed, {ki, static_cast<std::uint64_t>(K), static_cast<std::uint64_t>(i)});
        draws[static_cast<std::size_t>(i)] = estimate_gradient(model, store, x, K, kind, rng).gradients;
      });
      for (Group g : kAllGroups) {
        Matrix cols(store.scalar_count(g), opt.samples);
        for (Index i = 0; i < opt.samples; ++i) cols.col(i) = store.flatten(draws[static_cast<std::size_t>(i)], g);
        by_group[g].points.push_back(snr_statistics(cols, K));
      }
    }
    for (Group g : kAllGroups) {
      SnrSeries& s = by_group[g];
      std::vector<double> ks;
      std::vector<double> l2;
      std::vector<double> agg;
      for (const SnrPoint& p : s.points) {
        ks.push_back(static_cast<double>(p.K));
        l2.push_back(p.snr_l2);
        agg.push_back(p.snr_agg);
      }
      s.slope = log_log_slope(ks, l2);
      s.slope_agg = log_log_slope(ks, agg);
      report.series.push_back(std::move(s));
    }
  }
  return report;
}

}  // namespace psvo

#endif  // PSVO_GRAD_HPP
