/// @file run.hpp Training-run configuration (JSON) and the artifacts a run writes.
///
/// Run config:
///   { "objective": "svo"|"smc", "K": 8, "M": 8, "estimator": "biased",
///     "epochs": 300, "batch_size": 8, "learning_rate": 1e-3, "adam_betas": [0.9, 0.999],
///     "adam_eps": 1e-8, "clip_norm": 10, "seed": 0, "threads": 1, "checkpoint_every": 0,
///     "model": {...model config...},
///     "data": {"path": "<dataset dir>"} or
///             {"system": "fn"|"lorenz", "config": {...}, "trials": 100, "seed": 1, "split": [66, 17, 17]},
///     "output_dir": "<dir>" }
/// A relative output_dir is resolved against $PSVO_OUTPUT_ROOT when that is set.
///
/// Output directory:
///   training_log.csv    epoch,train_objective,val_objective,wall_seconds,param_norm,grad_norm,
///                       skipped_steps,failed_sequences   (epoch 0 = initial parameters)
///   checkpoints/epoch_NNNN.json, checkpoint_final.json, run.json (config echo and summary)
///   data/               the simulated dataset, when the config does not point at one

#ifndef PSVO_RUN_HPP
#define PSVO_RUN_HPP

#include "psvo/io.hpp"
#include "psvo/train.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace psvo {

struct DataSpec {
  std::filesystem::path path;  // a saved dataset; when empty the data are simulated
  std::string system = "fn";
  Json system_config = Json::object();
  Index trials = 100;
  std::uint64_t seed = 1;
  std::optional<SplitCounts> split;
};

struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  DataSpec data;
  std::filesystem::path output_dir;
};

inline std::filesystem::path resolve_output(const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("PSVO_OUTPUT_ROOT"); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / p;
  }
  return p;
}

/// Simulated dataset from a system name and its JSON config.
inline Dataset simulate_system(const std::string& system, const Json& config, Index trials, std::uint64_t seed,
                               const std::optional<SplitCounts>& split = std::nullopt) {
  Dataset ds;
  if (system == "fn") {
    ds = simulate_fn(fn_config_from_json(config), trials, seed);
  } else if (system == "lorenz") {
    ds = simulate_lorenz(lorenz_config_from_json(config), trials, seed);
  } else {
    throw std::invalid_argument("unknown system '" + system + "' (fn, lorenz)");
  }
  if (split) ds.assign_splits(*split);
  return ds;
}

inline DataSpec data_spec_from_json(const Json& j) {
  const std::string what = "run config 'data'";
  detail::check_keys(j, {"path", "system", "config", "trials", "seed", "split"}, what);
  DataSpec d;
  if (j.contains("path")) {
    for (const char* k : {"system", "config", "trials", "seed", "split"}) {
      if (j.contains(k)) throw std::invalid_argument(what + ": 'path' cannot be combined with '" + k + "'");
    }
    d.path = j.at("path").get<std::string>();
    return d;
  }
  detail::read_opt(j, "system", d.system, what);
  if (j.contains("config")) d.system_config = j.at("config");
  detail::read_opt(j, "trials", d.trials, what);
  detail::read_opt(j, "seed", d.seed, what);
  if (j.contains("split")) d.split = split_from_json(j.at("split"));
  return d;
}

inline Dataset load_data(const DataSpec& d) {
  if (!d.path.empty()) return load_dataset(d.path);
  return simulate_system(d.system, d.system_config, d.trials, d.seed, d.split);
}

inline RunConfig run_config_from_json(const Json& j) {
  const std::string what = "run config";
  detail::check_keys(j,
                     {"objective", "K", "M", "estimator", "epochs", "batch_size", "learning_rate", "adam_betas",
                      "adam_eps", "clip_norm", "seed", "threads", "checkpoint_every", "model", "data", "output_dir"},
                     what);
  RunConfig c;
  TrainConfig& t = c.train;
  std::string objective = "svo";
  detail::read_opt(j, "objective", objective, what);
  t.objective.kind = parse_objective(objective);
  detail::read_opt(j, "K", t.objective.K, what);
  if (j.contains("M")) {
    if (t.objective.kind != ObjectiveKind::Svo) throw std::invalid_argument(what + ": 'M' is only valid for svo");
    t.objective.M = j.at("M").get<Index>();
  }
  if (j.contains("estimator")) t.objective.estimator = EstimatorKind::parse(j.at("estimator").get<std::string>());
  detail::read_opt(j, "epochs", t.epochs, what);
  detail::read_opt(j, "batch_size", t.batch_size, what);
  detail::read_opt(j, "learning_rate", t.adam.lr, what);
  if (j.contains("adam_betas")) {
    const auto b = j.at("adam_betas").get<std::vector<double>>();
    if (b.size() != 2) throw std::invalid_argument(what + ": adam_betas must have two entries");
    t.adam.beta1 = b[0];
    t.adam.beta2 = b[1];
  }
  detail::read_opt(j, "adam_eps", t.adam.eps, what);
  detail::read_opt(j, "clip_norm", t.clip_norm, what);
  detail::read_opt(j, "seed", t.seed, what);
  detail::read_opt(j, "threads", t.threads, what);
  detail::read_opt(j, "checkpoint_every", t.checkpoint_every, what);
  if (!j.contains("model")) throw std::invalid_argument(what + ": missing 'model'");
  c.model = model_config_from_json(j.at("model"));
  if (!j.contains("data")) throw std::invalid_argument(what + ": missing 'data'");
  c.data = data_spec_from_json(j.at("data"));
  std::string out = "runs/run";
  detail::read_opt(j, "output_dir", out, what);
  c.output_dir = resolve_output(out);
  t.validate();
  Adam check(t.adam);  // rejects invalid optimizer settings up front
  return c;
}

inline std::string epoch_file(Index epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04lld.json", static_cast<long long>(epoch));
  return buf;
}

inline CsvWriter training_log_csv(const std::vector<EpochRecord>& log) {
  CsvWriter csv({"epoch", "train_objective", "val_objective", "wall_seconds", "param_norm", "grad_norm",
                 "skipped_steps", "failed_sequences"});
  for (const EpochRecord& r : log) {
    csv.row(r.epoch, r.train_objective, r.val_objective, r.wall_seconds, r.param_norm, r.grad_norm, r.skipped_steps,
            r.failed_sequences);
  }
  return csv;
}

/// Initializes, trains and writes every artifact. The log is rewritten after each epoch so
/// an interrupted run leaves a usable prefix.
inline TrainResult execute_run(const RunConfig& cfg, const Json& echo = Json::object(),
                               std::ostream* progress = &std::cerr) {
  const Dataset data = load_data(cfg.data);
  const SsmModel model(cfg.model);
  Rng init = Rng::stream(cfg.train.seed, {0});
  ParameterStore params = model.initialize(init);
  const auto& dir = cfg.output_dir;
  std::filesystem::create_directories(dir / "checkpoints");
  // Simulated data are kept next to the run so eval and snr can be pointed at them.
  if (cfg.data.path.empty()) save_dataset(dir / "data", data);

  std::vector<EpochRecord> log;
  auto meta = [&](Index epoch) {
    return Json{{"epoch", epoch}, {"objective", objective_name(cfg.train.objective.kind)},
                {"seed", cfg.train.seed}, {"data", data.metadata}};
  };
  TrainResult result = train(
      model, std::move(params), data, cfg.train,
      [&](const EpochRecord& r, const ParameterStore& p) {
        log.push_back(r);
        training_log_csv(log).save(dir / "training_log.csv");
        if (r.epoch == cfg.train.mid_epoch() || (cfg.train.checkpoint_every > 0 && r.epoch % cfg.train.checkpoint_every == 0)) {
          save_checkpoint(dir / "checkpoints" / epoch_file(r.epoch), Checkpoint{cfg.model, p, meta(r.epoch)});
        }
        if (progress != nullptr) {
          *progress << "epoch " << r.epoch << "  train " << r.train_objective << "  val " << r.val_objective << "  ("
                    << r.wall_seconds << " s)\n";
        }
      },
      progress);
  save_checkpoint(dir / "checkpoint_final.json", Checkpoint{cfg.model, result.final_params, meta(cfg.train.epochs)});
  Json summary = {{"config", echo},
                  {"epochs", cfg.train.epochs},
                  {"final_val_objective", result.log.back().val_objective},
                  {"wall_seconds", result.log.back().wall_seconds},
                  {"data", data.metadata}};
  write_json(dir / "run.json", summary);
  return result;
}

}  // namespace psvo

#endif  // PSVO_RUN_HPP
