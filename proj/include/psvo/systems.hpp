/// @file systems.hpp Synthetic benchmark systems and CSV time-series ingestion.
///
/// Fitzhugh-Nagumo:  V̇ = V − V³/3 − W + I_ext,  Ẇ = a(bV − cW);  x_t ~ N(V_t, obs_noise_var).
/// Lorenz:           ż₁ = σ(z₂ − z₁),  ż₂ = z₁(ρ − z₃) − z₂,  ż₃ = z₁z₂ − βz₃;
///                   x_t ~ N(net(z_t), noise_std²) with a fixed random one-hidden-layer tanh net.
/// Both are integrated with fixed-step RK4; the T stored states are spaced dt apart.

#ifndef PSVO_SYSTEMS_HPP
#define PSVO_SYSTEMS_HPP

#include "psvo/model.hpp"
#include "psvo/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

// ---------------------------------------------------------------------------------------------
// Integration

template <typename F>
Eigen::VectorXd rk4_step(F&& f, const Eigen::VectorXd& x, double dt) {
  const Eigen::VectorXd k1 = f(x);
  const Eigen::VectorXd k2 = f(Eigen::VectorXd(x + 0.5 * dt * k1));
  const Eigen::VectorXd k3 = f(Eigen::VectorXd(x + 0.5 * dt * k2));
  const Eigen::VectorXd k4 = f(Eigen::VectorXd(x + dt * k3));
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// T×d states; row 0 is x0 and row t is the state after t steps of size dt.
template <typename F>
Matrix rk4_integrate(F&& f, const Eigen::VectorXd& x0, double dt, Index T) {
  Matrix out(T, x0.size());
  Eigen::VectorXd x = x0;
  for (Index t = 0; t < T; ++t) {
    if (t > 0) x = rk4_step(f, x, dt);
    out.row(t) = x.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Datasets

struct SplitCounts {
  Index train = 0;
  Index val = 0;
  Index test = 0;

  [[nodiscard]] Index total() const { return train + val + test; }

  /// 66/17/17 proportions; the remainder after rounding goes to training.
  static SplitCounts proportional(Index n) {
    const auto v = static_cast<Index>(std::lround(0.17 * static_cast<double>(n)));
    return SplitCounts{n - 2 * v, v, v};
  }
};

struct Dataset {
  std::vector<Trajectory> trials;
  std::vector<Index> train;
  std::vector<Index> val;
  std::vector<Index> test;
  std::map<std::string, std::string> metadata;  // generator, seed, config, config_hash

  [[nodiscard]] Index size() const { return static_cast<Index>(trials.size()); }
  [[nodiscard]] Index d_x() const { return trials.empty() ? 0 : trials.front().observations.cols(); }
  [[nodiscard]] Index d_z() const { return trials.empty() ? 0 : trials.front().latents.cols(); }
  [[nodiscard]] Index length() const { return trials.empty() ? 0 : trials.front().length(); }

  [[nodiscard]] std::vector<Trajectory> subset(const std::vector<Index>& idx) const {
    std::vector<Trajectory> out;
    out.reserve(idx.size());
    for (Index i : idx) out.push_back(trials.at(static_cast<std::size_t>(i)));
    return out;
  }

  /// Consecutive split: the first `train` trials, then `val`, then `test`.
  void assign_splits(const SplitCounts& s) {
    if (s.train < 0 || s.val < 0 || s.test < 0 || s.total() != size()) {
      throw std::invalid_argument("dataset: split counts " + std::to_string(s.train) + "/" + std::to_string(s.val) +
                                  "/" + std::to_string(s.test) + " do not sum to " + std::to_string(size()) +
                                  " trials");
    }
    train.clear();
    val.clear();
    test.clear();
    for (Index i = 0; i < size(); ++i) {
      if (i < s.train) train.push_back(i);
      else if (i < s.train + s.val) val.push_back(i);
      else test.push_back(i);
    }
  }

  /// Splits disjoint and exhaustive; all trials valid and of equal shape.
  void validate() const {
    if (trials.empty()) throw std::invalid_argument("dataset: no trials");
    for (std::size_t i = 0; i < trials.size(); ++i) {
      trials[i].validate();
      if (trials[i].length() != length() || trials[i].observations.cols() != d_x() ||
          trials[i].latents.cols() != trials.front().latents.cols()) {
        throw std::invalid_argument("dataset: trial " + std::to_string(i) + " differs in shape from trial 0");
      }
    }
    std::vector<int> seen(trials.size(), 0);
    for (const auto* part : {&train, &val, &test}) {
      for (Index i : *part) {
        if (i < 0 || i >= size()) throw std::invalid_argument("dataset: split index out of range");
        ++seen[static_cast<std::size_t>(i)];
      }
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (seen[i] != 1) throw std::invalid_argument("dataset: trial " + std::to_string(i) + " is not in exactly one split");
    }
  }
};

/// FNV-1a, used to tag datasets with the configuration that produced them.
inline std::string config_hash(const std::string& canonical) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline void check_finite(const Matrix& states, const std::string& what, Index trial) {
  if (!states.allFinite()) {
    throw NumericalError(what + ": trajectory of trial " + std::to_string(trial) + " diverged (non-finite state)");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Fitzhugh-Nagumo

struct FnConfig {
  double a = 0.7;
  double b = 0.8;
  double c = 0.08;
  double i_ext = 1.0;
  Index T = 200;
  double dt = 0.25;
  double init_low = -3.0;
  double init_high = 3.0;
  double obs_noise_var = 0.01;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("fn config: dt must be positive");
    if (T < 2) throw std::invalid_argument("fn config: T must be at least 2");
    if (!(init_high >= init_low)) throw std::invalid_argument("fn config: empty initial box");
    if (!(obs_noise_var >= 0.0)) throw std::invalid_argument("fn config: negative observation variance");
  }

  [[nodiscard]] std::string canonical() const {
    return "fn;a=" + detail::fmt(a) + ";b=" + detail::fmt(b) + ";c=" + detail::fmt(c) + ";I=" + detail::fmt(i_ext) +
           ";T=" + std::to_string(T) + ";dt=" + detail::fmt(dt) + ";box=" + detail::fmt(init_low) + "," +
           detail::fmt(init_high) + ";obs_var=" + detail::fmt(obs_noise_var);
  }
};

inline Eigen::VectorXd fn_vector_field(const FnConfig& cfg, const Eigen::VectorXd& s) {
  const double v = s(0);
  const double w = s(1);
  Eigen::VectorXd d(2);
  d(0) = v - v * v * v / 3.0 - w + cfg.i_ext;
  d(1) = cfg.a * (cfg.b * v - cfg.c * w);
  return d;
}

inline Matrix fn_integrate(const FnConfig& cfg, const Eigen::VectorXd& z0) {
  return rk4_integrate([&](const Eigen::VectorXd& s) { return fn_vector_field(cfg, s); }, z0, cfg.dt, cfg.T);
}

/// Trials are generated in order from per-trial streams of `seed`; splits default to 66/17/17 proportions.
inline Dataset simulate_fn(const FnConfig& cfg, Index n_trials, std::uint64_t seed) {
  cfg.validate();
  if (n_trials < 1) throw std::invalid_argument("simulate_fn: need at least one trial");
  Dataset ds;
  const double noise_std = std::sqrt(cfg.obs_noise_var);
  for (Index i = 0; i < n_trials; ++i) {
    Rng rng = Rng::stream(seed, {1, static_cast<std::uint64_t>(i)});
    Eigen::VectorXd z0(2);
    z0(0) = rng.uniform(cfg.init_low, cfg.init_high);
    z0(1) = rng.uniform(cfg.init_low, cfg.init_high);
    Matrix z = fn_integrate(cfg, z0);
    detail::check_finite(z, "simulate_fn", i);
    Matrix x = z.col(0);
    if (noise_std > 0.0) x += noise_std * rng.normal_matrix(cfg.T, 1);
    ds.trials.push_back(Trajectory{std::move(x), std::move(z)});
  }
  ds.assign_splits(SplitCounts::proportional(n_trials));
  ds.metadata = {{"generator", "fitzhugh-nagumo"},
                 {"seed", std::to_string(seed)},
                 {"config", cfg.canonical()},
                 {"config_hash", config_hash(cfg.canonical())}};
  return ds;
}

// ---------------------------------------------------------------------------------------------
// Lorenz

struct LorenzConfig {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  Index T = 250;
  double dt = 0.02;
  double init_low = -10.0;
  double init_high = 10.0;
  Index d_x = 10;
  Index emission_hidden = 32;
  double emission_weight_scale = 1.0;  // 0 gives a constant emission (biases only)
  double input_scale = 0.1;            // latents are multiplied by this before the first layer
  double noise_std = 0.1;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("lorenz config: dt must be positive");
    if (T < 2) throw std::invalid_argument("lorenz config: T must be at least 2");
    if (d_x < 1 || emission_hidden < 1) throw std::invalid_argument("lorenz config: emission sizes must be positive");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("lorenz config: negative noise");
    if (!(init_high >= init_low)) throw std::invalid_argument("lorenz config: empty initial box");
  }

  [[nodiscard]] std::string canonical() const {
    return "lorenz;sigma=" + detail::fmt(sigma) + ";rho=" + detail::fmt(rho) + ";beta=" + detail::fmt(beta) +
           ";T=" + std::to_string(T) + ";dt=" + detail::fmt(dt) + ";box=" + detail::fmt(init_low) + "," +
           detail::fmt(init_high) + ";d_x=" + std::to_string(d_x) + ";hidden=" + std::to_string(emission_hidden) +
           ";wscale=" + detail::fmt(emission_weight_scale) + ";in_scale=" + detail::fmt(input_scale) +
           ";noise=" + detail::fmt(noise_std);
  }
};

inline Eigen::VectorXd lorenz_vector_field(const LorenzConfig& cfg, const Eigen::VectorXd& s) {
  Eigen::VectorXd d(3);
  d(0) = cfg.sigma * (s(1) - s(0));
  d(1) = s(0) * (cfg.rho - s(2)) - s(1);
  d(2) = s(0) * s(1) - cfg.beta * s(2);
  return d;
}

inline Matrix lorenz_integrate(const LorenzConfig& cfg, const Eigen::VectorXd& z0) {
  return rk4_integrate([&](const Eigen::VectorXd& s) { return lorenz_vector_field(cfg, s); }, z0, cfg.dt, cfg.T);
}

/// x = (tanh((s·z) W1 + b1) W2) · scale + b2, rows are time steps.
struct LorenzEmission {
  Matrix w1;  // 3×H
  Matrix b1;  // 1×H
  Matrix w2;  // H×d_x
  Matrix b2;  // 1×d_x
  double input_scale = 0.1;
  double scale = 1.0;

  [[nodiscard]] Matrix hidden_output(const Matrix& z) const {
    Matrix h = ((input_scale * z) * w1).rowwise() + b1.row(0);
    return h.array().tanh().matrix() * w2;
  }
  [[nodiscard]] Matrix operator()(const Matrix& z) const {
    return (scale * hidden_output(z)).rowwise() + b2.row(0);
  }
};

inline LorenzEmission make_lorenz_emission(const LorenzConfig& cfg, Rng& rng) {
  LorenzEmission e;
  e.input_scale = cfg.input_scale;
  const double s1 = cfg.emission_weight_scale * std::sqrt(6.0 / static_cast<double>(3 + cfg.emission_hidden));
  const double s2 = cfg.emission_weight_scale * std::sqrt(6.0 / static_cast<double>(cfg.emission_hidden + cfg.d_x));
  e.w1 = Matrix(3, cfg.emission_hidden);
  e.w2 = Matrix(cfg.emission_hidden, cfg.d_x);
  e.b1 = Matrix(1, cfg.emission_hidden);
  e.b2 = Matrix(1, cfg.d_x);
  for (Index i = 0; i < e.w1.size(); ++i) e.w1.data()[i] = rng.uniform(-s1, s1);
  for (Index i = 0; i < e.w2.size(); ++i) e.w2.data()[i] = rng.uniform(-s2, s2);
  for (Index i = 0; i < e.b1.size(); ++i) e.b1.data()[i] = rng.uniform(-0.5, 0.5);
  for (Index i = 0; i < e.b2.size(); ++i) e.b2.data()[i] = rng.normal();
  return e;
}

/// The emission's output scale is calibrated on the simulated latents so that the
/// noiseless observations have pooled standard deviation 1.
inline Dataset simulate_lorenz(const LorenzConfig& cfg, Index n_trials, std::uint64_t seed) {
  cfg.validate();
  if (n_trials < 1) throw std::invalid_argument("simulate_lorenz: need at least one trial");
  Rng emission_rng = Rng::stream(seed, {2});
  LorenzEmission emission = make_lorenz_emission(cfg, emission_rng);
  std::vector<Matrix> latents;
  for (Index i = 0; i < n_trials; ++i) {
    Rng rng = Rng::stream(seed, {3, static_cast<std::uint64_t>(i)});
    Eigen::VectorXd z0(3);
    for (Index d = 0; d < 3; ++d) z0(d) = rng.uniform(cfg.init_low, cfg.init_high);
    Matrix z = lorenz_integrate(cfg, z0);
    detail::check_finite(z, "simulate_lorenz", i);
    latents.push_back(std::move(z));
  }
  double sum = 0.0;
  double sq = 0.0;
  double count = 0.0;
  for (const Matrix& z : latents) {
    const Matrix h = emission.hidden_output(z);
    sum += h.sum();
    sq += h.squaredNorm();
    count += static_cast<double>(h.size());
  }
  const double var = sq / count - (sum / count) * (sum / count);
  emission.scale = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;

  Dataset ds;
  for (Index i = 0; i < n_trials; ++i) {
    Rng rng = Rng::stream(seed, {4, static_cast<std::uint64_t>(i)});
    Matrix& z = latents[static_cast<std::size_t>(i)];
    Matrix x = emission(z);
    if (cfg.noise_std > 0.0) x += cfg.noise_std * rng.normal_matrix(x.rows(), x.cols());
    ds.trials.push_back(Trajectory{std::move(x), std::move(z)});
  }
  ds.assign_splits(SplitCounts::proportional(n_trials));
  ds.metadata = {{"generator", "lorenz"},
                 {"seed", std::to_string(seed)},
                 {"config", cfg.canonical()},
                 {"config_hash", config_hash(cfg.canonical())}};
  return ds;
}

// ---------------------------------------------------------------------------------------------
// CSV ingestion

struct IngestConfig {
  Index downsample_to = 0;       // 0 keeps the original length
  Index segments_per_trial = 1;  // each trial is cut into this many equal parts before down-sampling
  bool normalize_max = true;     // divide each trial by its maximum absolute value
  std::optional<SplitCounts> split;  // default: 66/17/17 proportions
};

namespace detail {

inline std::vector<std::vector<double>> read_csv_numbers(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::size_t start = 0;
    std::size_t col = 0;
    while (true) {
      const std::size_t end = line.find(',', start);
      std::string cell = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      cell = b == std::string::npos ? "" : cell.substr(b, e - b + 1);
      ++col;
      double v = 0.0;
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      if (!cell.empty() && *first == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, last, v);
      if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(v)) {
        throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": column " + std::to_string(col) +
                                    " is not a finite number ('" + cell + "')");
      }
      row.push_back(v);
      if (end == std::string::npos) break;
      start = end + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": ragged row (" +
                                  std::to_string(row.size()) + " cells, expected " +
                                  std::to_string(rows.front().size()) + ")");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::invalid_argument("'" + path.string() + "' contains no data");
  return rows;
}

inline Matrix downsample(const Matrix& x, Index n) {
  if (n <= 0 || n == x.rows()) return x;
  if (n > x.rows()) {
    throw std::invalid_argument("cannot down-sample " + std::to_string(x.rows()) + " bins to " + std::to_string(n));
  }
  const Index stride = x.rows() / n;
  Matrix out(n, x.cols());
  for (Index i = 0; i < n; ++i) out.row(i) = x.row(i * stride);
  return out;
}

}  // namespace detail

/// Builds a dataset from `path`: either one CSV with one trial per row (1-D observations),
/// or a directory with one CSV per trial (rows are time steps, columns are dimensions;
/// files taken in name order). Each trial is normalized, cut into segments, and each
/// segment down-sampled by striding; segments become the dataset's sequences.
inline Dataset ingest_csv(const std::filesystem::path& path, const IngestConfig& cfg) {
  if (cfg.segments_per_trial < 1) throw std::invalid_argument("ingest: segments_per_trial must be at least 1");
  std::vector<Matrix> raw;
  std::vector<std::string> names;
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::invalid_argument("ingest: no .csv files in '" + path.string() + "'");
    for (const auto& f : files) {
      auto rows = detail::read_csv_numbers(f);
      Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
      for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (!raw.empty() && (m.rows() != raw.front().rows() || m.cols() != raw.front().cols())) {
        throw std::invalid_argument("ingest: '" + f.filename().string() + "' has shape " + std::to_string(m.rows()) +
                                    "x" + std::to_string(m.cols()) + ", expected " +
                                    std::to_string(raw.front().rows()) + "x" + std::to_string(raw.front().cols()));
      }
      raw.push_back(std::move(m));
      names.push_back(f.filename().string());
    }
  } else {
    auto rows = detail::read_csv_numbers(path);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      raw.push_back(Eigen::Map<const Eigen::VectorXd>(rows[r].data(), static_cast<Index>(rows[r].size())));
      names.push_back("row " + std::to_string(r + 1));
    }
  }

  Dataset ds;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Matrix x = raw[i];
    if (cfg.normalize_max) {
      const double m = x.cwiseAbs().maxCoeff();
      if (!(m > 0.0)) throw std::invalid_argument("ingest: trial '" + names[i] + "' is all zeros; cannot normalize");
      x /= m;
    }
    const Index seg_len = x.rows() / cfg.segments_per_trial;
    if (seg_len < 2) throw std::invalid_argument("ingest: trial '" + names[i] + "' is too short to segment");
    for (Index s = 0; s < cfg.segments_per_trial; ++s) {
      Matrix seg = detail::downsample(x.middleRows(s * seg_len, seg_len), cfg.downsample_to);
      ds.trials.push_back(Trajectory{std::move(seg), Matrix()});
    }
  }
  ds.assign_splits(cfg.split ? *cfg.split : SplitCounts::proportional(ds.size()));
  std::ostringstream desc;
  desc << "csv;downsample_to=" << cfg.downsample_to << ";segments=" << cfg.segments_per_trial
       << ";normalize_max=" << cfg.normalize_max;
  ds.metadata = {{"generator", "csv"},
                 {"source", path.string()},
                 {"config", desc.str()},
                 {"config_hash", config_hash(desc.str())}};
  ds.validate();
  return ds;
}

}  // namespace psvo

#endif  // PSVO_SYSTEMS_HPP
