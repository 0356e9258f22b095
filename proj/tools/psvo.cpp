// psvo: dataset generation, training, evaluation and gradient-SNR studies.

#include "psvo/eval.hpp"
#include "psvo/grad.hpp"
#include "psvo/io.hpp"
#include "psvo/run.hpp"
#include "psvo/verify.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace psvo;
using namespace psvo::acceptance;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw std::invalid_argument("empty list '" + s + "'");
  return out;
}

std::vector<Index> split_ints(const std::string& s) {
  std::vector<Index> out;
  for (const std::string& v : split_list(s)) {
    std::size_t used = 0;
    const long long k = std::stoll(v, &used);
    if (used != v.size() || k < 1) throw std::invalid_argument("bad positive integer '" + v + "' in '" + s + "'");
    out.push_back(static_cast<Index>(k));
  }
  return out;
}

std::vector<Index> split_indices(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  if (split == "all") {
    std::vector<Index> all;
    for (Index i = 0; i < d.size(); ++i) all.push_back(i);
    return all;
  }
  throw std::invalid_argument("unknown split '" + split + "' (train, val, test, all)");
}

// generate ------------------------------------------------------------------------------------

struct GenerateArgs {
  std::string system = "fn";
  std::string config;
  std::string out;
  Index trials = 100;
  std::uint64_t seed = 1;
};

int run_generate(const GenerateArgs& a) {
  Json cfg = a.config.empty() ? Json::object() : read_json(a.config);
  Index trials = a.trials;
  std::uint64_t seed = a.seed;
  std::optional<SplitCounts> split;
  // Run-level keys may sit next to the system parameters.
  if (cfg.contains("trials")) {
    trials = cfg.at("trials").get<Index>();
    cfg.erase("trials");
  }
  if (cfg.contains("seed")) {
    seed = cfg.at("seed").get<std::uint64_t>();
    cfg.erase("seed");
  }
  if (cfg.contains("split")) {
    split = split_from_json(cfg.at("split"));
    cfg.erase("split");
  }
  const Dataset ds = simulate_system(a.system, cfg, trials, seed, split);
  const fs::path out = resolve_output(a.out);
  save_dataset(out, ds);
  std::cout << "wrote " << ds.size() << " trials (" << ds.train.size() << "/" << ds.val.size() << "/"
            << ds.test.size() << ") to " << out.string() << "\n";
  return 0;
}

// ingest --------------------------------------------------------------------------------------

int run_ingest(const std::string& csv, const std::string& config, const std::string& out_dir) {
  const IngestConfig cfg = config.empty() ? IngestConfig{} : ingest_config_from_json(read_json(config));
  const Dataset ds = ingest_csv(csv, cfg);
  const fs::path out = resolve_output(out_dir);
  save_dataset(out, ds);
  std::cout << "wrote " << ds.size() << " sequences of length " << ds.length() << " to " << out.string() << "\n";
  return 0;
}

// train ---------------------------------------------------------------------------------------

int run_train(const std::string& config, const std::string& out_override, int threads) {
  const Json j = read_json(config);
  RunConfig cfg = run_config_from_json(j);
  if (!out_override.empty()) cfg.output_dir = resolve_output(out_override);
  if (threads > 0) cfg.train.threads = threads;
  const TrainResult r = execute_run(cfg, j);
  std::cout << "final validation objective " << r.log.back().val_objective << "; artifacts in "
            << cfg.output_dir.string() << "\n";
  return 0;
}

// eval ----------------------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  std::string mode = "smooth";
  Index kmax = 30;
  Index K = 16;
  Index M = 16;
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.data);
  const SsmModel model(ck.config);
  if (ds.d_x() != ck.config.d_x) throw std::invalid_argument("eval: data and checkpoint disagree on d_x");
  InferenceSettings s{parse_inference_mode(a.mode), a.K, a.M};
  const std::vector<Index> idx = split_indices(ds, a.split);
  if (idx.empty()) throw std::invalid_argument("eval: split '" + a.split + "' is empty");
  std::vector<Matrix> latents;
  const RolloutReport rep = evaluate_rollout(model, ck.params, ds.subset(idx), a.kmax, s, a.seed, &latents);

  const fs::path out = resolve_output(a.out.empty() ? fs::path(a.checkpoint).parent_path() / "eval" : fs::path(a.out));
  CsvWriter summary({"k", "mse", "mse_mean", "r2", "baseline"});
  for (Index k = 1; k <= rep.k_max(); ++k) {
    const auto i = static_cast<std::size_t>(k - 1);
    summary.row(k, rep.mse[i], rep.mse_mean[i], rep.r2[i], rep.baseline[i]);
  }
  summary.save(out / "rollout.csv");
  CsvWriter trials({"trial", "k", "mse", "r2"});
  for (std::size_t t = 0; t < idx.size(); ++t)
    for (Index k = 1; k <= rep.k_max(); ++k)
      trials.row(idx[t], k, rep.trial_mse[t][static_cast<std::size_t>(k - 1)], rep.trial_r2[t][static_cast<std::size_t>(k - 1)]);
  trials.save(out / "rollout_trials.csv");

  std::vector<std::string> header{"trial", "t"};
  for (Index d = 0; d < ck.config.d_z; ++d) header.push_back("z" + std::to_string(d));
  for (Index d = 0; d < ds.d_x(); ++d) header.push_back("x" + std::to_string(d));
  CsvWriter lat(header);
  for (std::size_t t = 0; t < idx.size(); ++t) {
    const Matrix& x = ds.trials[static_cast<std::size_t>(idx[t])].observations;
    for (Index r = 0; r < x.rows(); ++r) {
      std::vector<std::string> row{std::to_string(idx[t]), std::to_string(r)};
      for (Index d = 0; d < latents[t].cols(); ++d) row.push_back(CsvWriter::cell(latents[t](r, d)));
      for (Index d = 0; d < x.cols(); ++d) row.push_back(CsvWriter::cell(x(r, d)));
      lat.add_row(row);
    }
  }
  lat.save(out / "latents.csv");
  std::cout << "R2_1 " << rep.r2_at(1) << "  R2_" << rep.k_max() << " " << rep.r2_at(rep.k_max()) << "; wrote "
            << out.string() << "\n";
  return 0;
}

// snr -----------------------------------------------------------------------------------------

struct SnrArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string kgrid = "4,8,16,32,64,128";
  std::string estimators = "biased,categorical,concrete:0.2,concrete:inverseK";
  Index n = 100;
  Index trial = -1;  // default: first training trial
  std::uint64_t seed = 0;
  int threads = 1;
};

int run_snr(const SnrArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.data);
  const SsmModel model(ck.config);
  const Index trial = a.trial >= 0 ? a.trial : ds.train.at(0);
  if (trial >= ds.size()) throw std::invalid_argument("snr: trial index out of range");
  std::vector<EstimatorKind> kinds;
  for (const std::string& e : split_list(a.estimators)) kinds.push_back(EstimatorKind::parse(e));
  SnrOptions opt;
  opt.k_grid = split_ints(a.kgrid);
  opt.samples = a.n;
  opt.seed = a.seed;
  opt.threads = a.threads;
  const SnrReport rep = measure_snr(model, ck.params, ds.trials[static_cast<std::size_t>(trial)].observations, kinds, opt);

  const fs::path out = resolve_output(a.out.empty() ? fs::path(a.checkpoint).parent_path() / "snr" : fs::path(a.out));
  CsvWriter csv({"estimator", "group", "K", "N", "snr_l2", "snr_agg", "log_K", "log_snr_l2"});
  Json slopes = Json::object();
  for (const SnrSeries& s : rep.series) {
    for (const SnrPoint& p : s.points) {
      csv.row(s.kind, group_name(s.group), p.K, p.N, p.snr_l2, p.snr_agg, std::log(static_cast<double>(p.K)),
              std::log(p.snr_l2));
    }
    // slope: d log SNR / d log K (1/2 for O(sqrt K)). slope_doubled uses the axis convention
    // where O(sqrt K) appears with slope 1.
    slopes[s.kind][group_name(s.group)] = {{"slope", s.slope}, {"slope_agg", s.slope_agg}, {"slope_doubled", 2.0 * s.slope}};
  }
  csv.save(out / "snr.csv");
  write_json(out / "snr.json", Json{{"checkpoint", a.checkpoint}, {"trial", trial}, {"samples", a.n}, {"slopes", slopes}});
  for (const SnrSeries& s : rep.series) std::cout << s.kind << " " << group_name(s.group) << " slope " << s.slope << "\n";
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

// verify --------------------------------------------------------------------------------------

int run_verify(const std::string& criteria, const std::string& out, int threads) {
  VerifyOptions opt;
  if (!criteria.empty()) {
    for (Index c : split_ints(criteria)) opt.only.insert(static_cast<int>(c));
  }
  opt.threads = threads;
  opt.log = &std::cerr;
  opt.cache_dir = resolve_output("acceptance_cache");
  const std::vector<CriterionResult> results = run_acceptance(opt, std::cout);
  CsvWriter csv({"criterion", "name", "pass", "seconds", "detail"});
  bool all = true;
  for (const CriterionResult& r : results) {
    std::string detail = r.detail;
    for (char& c : detail)
      if (c == ',' || c == '\n') c = ';';
    csv.row(r.id, r.name, r.pass ? "pass" : "fail", r.seconds, detail);
    all = all && r.pass;
  }
  if (!out.empty()) csv.save(resolve_output(out));
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational inference for state-space models with filtering SMC and smoothed objectives"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Simulate a dataset (writes dataset.json and observations.csv)");
  g->add_option("--system", gen.system, "fn or lorenz")->check(CLI::IsMember({"fn", "lorenz"}));
  g->add_option("--config", gen.config, "System config JSON (may also hold trials, seed, split)")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--trials", gen.trials, "Number of trials")->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Seed");

  std::string ingest_csv_path;
  std::string ingest_config;
  std::string ingest_out;
  auto* in = app.add_subcommand("ingest", "Build a dataset from CSV recordings");
  in->add_option("--csv", ingest_csv_path, "CSV file (one trial per row) or directory of CSV files")
      ->required()
      ->check(CLI::ExistingPath);
  in->add_option("--config", ingest_config, "Ingest config JSON")->check(CLI::ExistingFile);
  in->add_option("--out", ingest_out, "Output directory")->required();

  std::string train_config;
  std::string train_out;
  int train_threads = 0;
  auto* tr = app.add_subcommand("train", "Train a model (writes training_log.csv and checkpoints)");
  tr->add_option("--config", train_config, "Run config JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", train_out, "Override the config's output_dir");
  tr->add_option("--threads", train_threads, "Worker threads (1 gives bit-exact runs)")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "k-step rollout R² and inferred latent trajectories");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingPath);
  e->add_option("--kmax", ev.kmax, "Largest prediction horizon")->check(CLI::PositiveNumber);
  e->add_option("--mode", ev.mode, "Latent inference: filter or smooth")->check(CLI::IsMember({"filter", "smooth"}));
  e->add_option("--split", ev.split, "train, val, test or all");
  e->add_option("--K", ev.K, "Particles")->check(CLI::PositiveNumber);
  e->add_option("--M", ev.M, "Subparticles (smooth)")->check(CLI::PositiveNumber);
  e->add_option("--seed", ev.seed, "Seed");
  e->add_option("--out", ev.out, "Output directory (default: <checkpoint dir>/eval)");

  SnrArgs sn;
  auto* s = app.add_subcommand("snr", "Gradient signal-to-noise ratio versus K");
  s->add_option("--checkpoint", sn.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  s->add_option("--data", sn.data, "Dataset directory")->required()->check(CLI::ExistingPath);
  s->add_option("--kgrid", sn.kgrid, "Comma-separated particle counts");
  s->add_option("--estimators", sn.estimators, "Comma-separated estimators");
  s->add_option("--n", sn.n, "Gradient samples per K")->check(CLI::Range(Index{2}, Index{1000000}));
  s->add_option("--trial", sn.trial, "Trial index (default: first training trial)");
  s->add_option("--seed", sn.seed, "Seed");
  s->add_option("--threads", sn.threads, "Worker threads")->check(CLI::PositiveNumber);
  s->add_option("--out", sn.out, "Output directory (default: <checkpoint dir>/snr)");

  std::string verify_criteria;
  std::string verify_out;
  int verify_threads = 1;
  auto* v = app.add_subcommand("verify", "");  // hidden: empty description
  v->group("");
  v->add_option("--criteria", verify_criteria, "Comma-separated criterion numbers (default: all)");
  v->add_option("--out", verify_out, "CSV path for the pass/fail table");
  v->add_option("--threads", verify_threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*g) return run_generate(gen);
    if (*in) return run_ingest(ingest_csv_path, ingest_config, ingest_out);
    if (*tr) return run_train(train_config, train_out, train_threads);
    if (*e) return run_eval(ev);
    if (*s) return run_snr(sn);
    if (*v) return run_verify(verify_criteria, verify_out, verify_threads);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
