/// @file io.hpp JSON checkpoints, configs and datasets; CSV writing.
///
/// Checkpoint layout:
///   { "model": {d_x, d_z, d_c, hidden_widths, share_transition, covariance_mode, alpha},
///     "parameters": { name: {"group": g, "shape": [r, c], "values": [row-major]} },
///     "meta": {...} }
/// Doubles are written with round-trip precision, so save/load is bit-exact.

#ifndef PSVO_IO_HPP
#define PSVO_IO_HPP

#include "psvo/model.hpp"
#include "psvo/params.hpp"
#include "psvo/systems.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------------------------
// Files

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(1) + "\n"); }

/// Minimal CSV writer: a fixed header, then rows of cells. Doubles use round-trip precision.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { add_row(header); }

  template <typename... Cells>
  void row(const Cells&... cells) {
    std::vector<std::string> r;
    (r.push_back(cell(cells)), ...);
    add_row(r);
  }

  void add_row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw std::logic_error("csv: row has the wrong number of cells");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) text_ << ',';
      text_ << cells[i];
    }
    text_ << '\n';
  }

  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) {
    std::ostringstream s;
    s << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return s.str();
  }
  template <typename I>
    requires std::is_integral_v<I>
  static std::string cell(I v) {
    return std::to_string(v);
  }

  [[nodiscard]] std::string str() const { return text_.str(); }
  void save(const std::filesystem::path& path) const { write_text(path, str()); }

 private:
  std::size_t columns_;
  std::ostringstream text_;
};

// ---------------------------------------------------------------------------------------------
// Matrices

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw std::invalid_argument(what + ": expected an array of rows");
  if (j.empty()) return Matrix();
  const auto cols = j.front().size();
  Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw std::invalid_argument(what + ": ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw std::invalid_argument(what + ": non-numeric entry");
      m(static_cast<Index>(r), static_cast<Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

// ---------------------------------------------------------------------------------------------
// Configs

namespace detail {

/// Rejects keys outside `allowed`, so typos in config files are reported.
inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw std::invalid_argument(what + ": expected a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw std::invalid_argument(what + ": unknown key '" + k + "'");
  }
}

template <typename T>
void read_opt(const Json& j, const char* key, T& out, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw std::invalid_argument(what + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline Json model_config_to_json(const ModelConfig& c) {
  return Json{{"d_x", c.d_x},
              {"d_z", c.d_z},
              {"d_c", c.d_c},
              {"hidden_widths", c.hidden_widths},
              {"share_transition", c.share_transition},
              {"covariance_mode", c.covariance_mode == CovarianceMode::Diagonal ? "diagonal" : "locally_linear"},
              {"alpha", c.alpha},
              {"transition_std", c.transition_std},
              {"initial_std", c.initial_std},
              {"encoder_std", c.encoder_std},
              {"backward_std", c.backward_std}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  const std::string what = "model config";
  detail::check_keys(j,
                     {"d_x", "d_z", "d_c", "hidden_widths", "share_transition", "covariance_mode", "alpha",
                      "transition_std", "initial_std", "encoder_std", "backward_std"},
                     what);
  ModelConfig c;
  detail::read_opt(j, "d_x", c.d_x, what);
  detail::read_opt(j, "d_z", c.d_z, what);
  detail::read_opt(j, "d_c", c.d_c, what);
  detail::read_opt(j, "hidden_widths", c.hidden_widths, what);
  detail::read_opt(j, "share_transition", c.share_transition, what);
  detail::read_opt(j, "alpha", c.alpha, what);
  detail::read_opt(j, "transition_std", c.transition_std, what);
  detail::read_opt(j, "initial_std", c.initial_std, what);
  detail::read_opt(j, "encoder_std", c.encoder_std, what);
  detail::read_opt(j, "backward_std", c.backward_std, what);
  if (j.contains("covariance_mode")) {
    const std::string m = j.at("covariance_mode").get<std::string>();
    if (m == "diagonal") c.covariance_mode = CovarianceMode::Diagonal;
    else if (m == "locally_linear") c.covariance_mode = CovarianceMode::LocallyLinear;
    else throw std::invalid_argument(what + ": covariance_mode must be 'diagonal' or 'locally_linear'");
  }
  c.validate();
  return c;
}

inline FnConfig fn_config_from_json(const Json& j) {
  const std::string what = "fn config";
  detail::check_keys(j, {"a", "b", "c", "I_ext", "T", "dt", "init_box", "obs_noise_var"}, what);
  FnConfig c;
  detail::read_opt(j, "a", c.a, what);
  detail::read_opt(j, "b", c.b, what);
  detail::read_opt(j, "c", c.c, what);
  detail::read_opt(j, "I_ext", c.i_ext, what);
  detail::read_opt(j, "T", c.T, what);
  detail::read_opt(j, "dt", c.dt, what);
  detail::read_opt(j, "obs_noise_var", c.obs_noise_var, what);
  if (j.contains("init_box")) {
    auto box = j.at("init_box").get<std::vector<double>>();
    if (box.size() != 2) throw std::invalid_argument(what + ": init_box must be [low, high]");
    c.init_low = box[0];
    c.init_high = box[1];
  }
  c.validate();
  return c;
}

inline LorenzConfig lorenz_config_from_json(const Json& j) {
  const std::string what = "lorenz config";
  detail::check_keys(j,
                     {"sigma", "rho", "beta", "T", "dt", "init_box", "d_x", "emission_hidden",
                      "emission_weight_scale", "input_scale", "noise_std"},
                     what);
  LorenzConfig c;
  detail::read_opt(j, "sigma", c.sigma, what);
  detail::read_opt(j, "rho", c.rho, what);
  detail::read_opt(j, "beta", c.beta, what);
  detail::read_opt(j, "T", c.T, what);
  detail::read_opt(j, "dt", c.dt, what);
  detail::read_opt(j, "d_x", c.d_x, what);
  detail::read_opt(j, "emission_hidden", c.emission_hidden, what);
  detail::read_opt(j, "emission_weight_scale", c.emission_weight_scale, what);
  detail::read_opt(j, "input_scale", c.input_scale, what);
  detail::read_opt(j, "noise_std", c.noise_std, what);
  if (j.contains("init_box")) {
    auto box = j.at("init_box").get<std::vector<double>>();
    if (box.size() != 2) throw std::invalid_argument(what + ": init_box must be [low, high]");
    c.init_low = box[0];
    c.init_high = box[1];
  }
  c.validate();
  return c;
}

inline SplitCounts split_from_json(const Json& j) {
  auto v = j.get<std::vector<Index>>();
  if (v.size() != 3) throw std::invalid_argument("split must be [train, val, test]");
  return SplitCounts{v[0], v[1], v[2]};
}

inline IngestConfig ingest_config_from_json(const Json& j) {
  const std::string what = "ingest config";
  detail::check_keys(j, {"downsample_to", "segments_per_trial", "normalize", "split"}, what);
  IngestConfig c;
  detail::read_opt(j, "downsample_to", c.downsample_to, what);
  detail::read_opt(j, "segments_per_trial", c.segments_per_trial, what);
  if (j.contains("normalize")) {
    const std::string n = j.at("normalize").get<std::string>();
    if (n == "per_trial_max") c.normalize_max = true;
    else if (n == "none") c.normalize_max = false;
    else throw std::invalid_argument(what + ": normalize must be 'per_trial_max' or 'none'");
  }
  if (j.contains("split")) c.split = split_from_json(j.at("split"));
  return c;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelConfig config;
  ParameterStore params;
  Json meta = Json::object();
};

inline Json checkpoint_to_json(const Checkpoint& c) {
  Json params = Json::object();
  for (const auto& [name, p] : c.params.entries()) {
    Json values = Json::array();
    for (Index r = 0; r < p.value.rows(); ++r)
      for (Index col = 0; col < p.value.cols(); ++col) values.push_back(p.value(r, col));
    params[name] = Json{{"group", group_name(p.group)}, {"shape", {p.value.rows(), p.value.cols()}}, {"values", values}};
  }
  return Json{{"model", model_config_to_json(c.config)}, {"parameters", params}, {"meta", c.meta}};
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("model") || !j.contains("parameters")) {
    throw std::invalid_argument("checkpoint: missing 'model' or 'parameters'");
  }
  Checkpoint c;
  c.config = model_config_from_json(j.at("model"));
  for (const auto& [name, p] : j.at("parameters").items()) {
    const auto shape = p.at("shape").get<std::vector<Index>>();
    const auto values = p.at("values").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Index>(values.size())) {
      throw std::invalid_argument("checkpoint: parameter '" + name + "' has inconsistent shape");
    }
    Matrix m(shape[0], shape[1]);
    for (Index r = 0; r < shape[0]; ++r)
      for (Index col = 0; col < shape[1]; ++col) m(r, col) = values[static_cast<std::size_t>(r * shape[1] + col)];
    c.params.add(name, parse_group(p.at("group").get<std::string>()), std::move(m));
  }
  if (j.contains("meta")) c.meta = j.at("meta");
  // Parameter names must match what the model expects.
  SsmModel model(c.config);
  Rng rng(0);
  const ParameterStore fresh = model.initialize(rng);
  if (fresh.names() != c.params.names()) throw std::invalid_argument("checkpoint: parameters do not match the model");
  for (const auto& [name, p] : fresh.entries()) {
    const Parameter& q = c.params.at(name);
    if (q.group != p.group || q.value.rows() != p.value.rows() || q.value.cols() != p.value.cols()) {
      throw std::invalid_argument("checkpoint: parameter '" + name + "' does not match the model");
    }
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_json(path, checkpoint_to_json(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json(path)); }

// ---------------------------------------------------------------------------------------------
// Datasets

inline Json dataset_to_json(const Dataset& d) {
  Json trials = Json::array();
  for (const Trajectory& t : d.trials) {
    Json tj{{"observations", matrix_to_json(t.observations)}};
    if (t.latents.size() != 0) tj["latents"] = matrix_to_json(t.latents);
    trials.push_back(std::move(tj));
  }
  return Json{{"trials", trials},
              {"split", {{"train", d.train}, {"val", d.val}, {"test", d.test}}},
              {"metadata", d.metadata}};
}

inline Dataset dataset_from_json(const Json& j) {
  Dataset d;
  for (const Json& t : j.at("trials")) {
    Trajectory tr;
    tr.observations = matrix_from_json(t.at("observations"), "dataset observations");
    if (t.contains("latents")) tr.latents = matrix_from_json(t.at("latents"), "dataset latents");
    d.trials.push_back(std::move(tr));
  }
  const Json& s = j.at("split");
  d.train = s.at("train").get<std::vector<Index>>();
  d.val = s.at("val").get<std::vector<Index>>();
  d.test = s.at("test").get<std::vector<Index>>();
  if (j.contains("metadata")) d.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  d.validate();
  return d;
}

/// A dataset directory holds dataset.json (and, for convenience, observations.csv).
inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  write_json(dir / "dataset.json", dataset_to_json(d));
  std::vector<std::string> header{"trial", "split", "t"};
  for (Index i = 0; i < d.d_x(); ++i) header.push_back("x" + std::to_string(i));
  for (Index i = 0; i < d.d_z(); ++i) header.push_back("z" + std::to_string(i));
  CsvWriter csv(header);
  auto split_of = [&](Index i) -> std::string {
    for (Index k : d.train)
      if (k == i) return "train";
    for (Index k : d.val)
      if (k == i) return "val";
    return "test";
  };
  for (Index i = 0; i < d.size(); ++i) {
    const Trajectory& tr = d.trials[static_cast<std::size_t>(i)];
    const std::string sp = split_of(i);
    for (Index t = 0; t < tr.length(); ++t) {
      std::vector<std::string> r{std::to_string(i), sp, std::to_string(t)};
      for (Index c = 0; c < tr.observations.cols(); ++c) r.push_back(CsvWriter::cell(tr.observations(t, c)));
      for (Index c = 0; c < tr.latents.cols(); ++c) r.push_back(CsvWriter::cell(tr.latents(t, c)));
      csv.add_row(r);
    }
  }
  csv.save(dir / "observations.csv");
}

/// Accepts a dataset directory or a dataset.json path.
inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto file = std::filesystem::is_directory(path) ? path / "dataset.json" : path;
  return dataset_from_json(read_json(file));
}

}  // namespace psvo

#endif  // PSVO_IO_HPP
