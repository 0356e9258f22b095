#include "psvo/io.hpp"
#include "psvo/run.hpp"
#include "psvo/train.hpp"
#include "psvo/verify.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

using namespace psvo;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("psvo_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

Json small_run(const std::filesystem::path& out, Index epochs) {
  return Json{{"objective", "svo"},
              {"K", 2},
              {"M", 2},
              {"epochs", epochs},
              {"batch_size", 2},
              {"seed", 3},
              {"model", Json{{"d_x", 1}, {"d_z", 2}, {"d_c", 2}, {"hidden_widths", {4}}}},
              {"data", Json{{"system", "fn"}, {"config", Json{{"T", 12}}}, {"trials", 6}, {"seed", 1}, {"split", {4, 1, 1}}}},
              {"output_dir", out.string()}};
}

}  // namespace

TEST(Adam, MinimizesQuadratic) {
  ParameterStore s;
  s.add("x", Group::Theta, Matrix::Constant(1, 1, 3.0));
  Adam adam({0.1, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 500; ++i) adam.step(s, {{"x", 2.0 * s.value("x")}});
  EXPECT_LT(std::abs(s.value("x")(0, 0)), 1e-2);
  EXPECT_EQ(adam.steps(), 500);
}

TEST(Adam, SkipsNonFiniteStep) {
  ParameterStore s;
  s.add("x", Group::Theta, Matrix::Constant(1, 1, 1.0));
  Adam adam;
  std::string bad;
  EXPECT_FALSE(adam.step(s, {{"x", Matrix::Constant(1, 1, std::nan(""))}}, &bad));
  EXPECT_EQ(bad, "x");
  EXPECT_EQ(s.value("x")(0, 0), 1.0);
  EXPECT_THROW(adam.step(s, {}), std::invalid_argument);
  EXPECT_THROW(Adam({-1.0, 0.9, 0.999, 1e-8}), std::invalid_argument);
}

TEST(Train, LogStartsWithInitialParameters) {
  FnConfig fc;
  fc.T = 15;
  Dataset ds = simulate_fn(fc, 6, 2);
  ds.assign_splits({4, 1, 1});
  ModelConfig mc;
  mc.d_x = 1;
  mc.hidden_widths = {4};
  const SsmModel model(mc);
  Rng rng(1);
  const ParameterStore init = model.initialize(rng);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.objective.K = 2;
  tc.objective.M = 2;
  const TrainResult r = train(model, init, ds, tc, {}, nullptr);
  ASSERT_EQ(r.log.size(), 4u);
  EXPECT_EQ(r.log[0].epoch, 0);
  EXPECT_TRUE(std::isnan(r.log[0].train_objective));
  EXPECT_TRUE(std::isfinite(r.log[3].val_objective));
  EXPECT_FALSE(r.final_params == init);
  EXPECT_TRUE(r.snapshots.count(1) == 1);  // mid epoch = 3 / 2
}

TEST(Run, ZeroEpochCheckpointEqualsInitialization) {
  const auto dir = temp_dir("run_zero");
  const Json j = small_run(dir / "out", 0);
  const RunConfig cfg = run_config_from_json(j);
  execute_run(cfg, j, nullptr);
  const Checkpoint c = load_checkpoint(dir / "out" / "checkpoint_final.json");
  Rng rng = Rng::stream(3, {0});
  EXPECT_TRUE(c.params == SsmModel(cfg.model).initialize(rng));
  EXPECT_EQ(read_json(dir / "out" / "run.json").at("config"), j);
}

TEST(Run, WritesLogAndCheckpoints) {
  const auto dir = temp_dir("run_two");
  const Json j = small_run(dir / "out", 2);
  execute_run(run_config_from_json(j), j, nullptr);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "checkpoints" / "epoch_0001.json"));
  EXPECT_EQ(load_dataset(dir / "out" / "data").size(), 6);
  const auto log = acceptance::read_training_log(dir / "out" / "training_log.csv");
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log[2].epoch, 2);
}

TEST(Run, ConfigValidation) {
  Json j = small_run("x", 1);
  j["objective"] = "smc";
  EXPECT_THROW(run_config_from_json(j), std::invalid_argument);  // M is svo-only
  j.erase("M");
  EXPECT_NO_THROW(run_config_from_json(j));
  j["learning_rate"] = -1.0;
  EXPECT_THROW(run_config_from_json(j), std::invalid_argument);
  j.erase("learning_rate");
  j["unknown"] = 1;
  EXPECT_THROW(run_config_from_json(j), std::invalid_argument);
  j.erase("unknown");
  j["data"]["path"] = "somewhere";
  EXPECT_THROW(run_config_from_json(j), std::invalid_argument);
  Json no_model = small_run("x", 1);
  no_model.erase("model");
  EXPECT_THROW(run_config_from_json(no_model), std::invalid_argument);
}

TEST(Io, CheckpointRoundTrip) {
  const auto dir = temp_dir("ckpt");
  ModelConfig mc;
  mc.d_x = 3;
  mc.share_transition = false;
  mc.covariance_mode = CovarianceMode::LocallyLinear;
  const SsmModel model(mc);
  Rng rng(4);
  const ParameterStore p = model.initialize(rng);
  save_checkpoint(dir / "c.json", Checkpoint{mc, p, Json{{"epoch", 7}}});
  const Checkpoint c = load_checkpoint(dir / "c.json");
  EXPECT_TRUE(c.params == p);
  EXPECT_EQ(c.meta.at("epoch"), 7);
  EXPECT_EQ(model_config_to_json(c.config), model_config_to_json(mc));
}

TEST(Io, DatasetRoundTrip) {
  const auto dir = temp_dir("dataset");
  const Dataset d = simulate_fn(FnConfig{}, 10, 5);
  save_dataset(dir / "d", d);
  const Dataset e = load_dataset(dir / "d");
  ASSERT_EQ(e.size(), 10);
  EXPECT_EQ(e.trials[3].observations, d.trials[3].observations);
  EXPECT_EQ(e.trials[3].latents, d.trials[3].latents);
  EXPECT_EQ(e.val, d.val);
  EXPECT_EQ(e.metadata, d.metadata);
}

TEST(Io, RejectsMalformedJson) {
  const auto dir = temp_dir("badjson");
  std::ofstream(dir / "a.json") << "{ not json";
  EXPECT_THROW(read_json(dir / "a.json"), std::invalid_argument);
  EXPECT_THROW(model_config_from_json(Json{{"d_x", 1}, {"hidden", {4}}}), std::invalid_argument);
  EXPECT_THROW(model_config_from_json(Json{{"d_x", -1}}), std::invalid_argument);
}

TEST(Configs, ShippedRecipesMatchAcceptanceRecipes) {
  const std::filesystem::path dir = PSVO_CONFIG_DIR;
  auto same = [&](const std::string& file, const Json& recipe) {
    EXPECT_EQ(read_json(dir / file), recipe) << file;
  };
  for (std::uint64_t s : {0, 1, 2}) {
    same("fn_svo_k8_m8_seed" + std::to_string(s) + ".json", acceptance::fn_svo_recipe(s));
    same("fn_smc_k64_seed" + std::to_string(s) + ".json", acceptance::fn_smc_recipe(s));
    same("fn_shared_k16_seed" + std::to_string(s) + ".json", acceptance::fn_shared_study_recipe(true, s));
    same("fn_separate_k16_seed" + std::to_string(s) + ".json", acceptance::fn_shared_study_recipe(false, s));
  }
  same("lorenz_svo_k4_m4.json", acceptance::lorenz_recipe());
  for (const auto& e : std::filesystem::directory_iterator(dir)) EXPECT_NO_THROW(run_config_from_json(read_json(e.path())));
}

TEST(Acceptance, EpochsToReachUsesTrailingMean) {
  const std::vector<double> curve{-10, -8, -6, -4, -2, 0, 0, 0};
  // Trailing means: -10, -9, -8, -7, -6, then -4 at epoch 5.
  EXPECT_EQ(acceptance::epochs_to_reach(curve, -4.0, 5), 5);
  EXPECT_EQ(acceptance::epochs_to_reach(curve, 100.0, 5), -1);
}

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PSVO_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("train"), 2);
  EXPECT_EQ(run_cli("eval --checkpoint"), 2);
  EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, RuntimeErrorsExitWithOne) {
  const auto dir = temp_dir("cli_err");
  std::ofstream(dir / "bad.json") << "{\"epochs\": 1}";
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string()), 1);
}

TEST(Cli, GenerateTrainEvalSnr) {
  const auto dir = temp_dir("cli_flow");
  std::ofstream(dir / "fn.json") << R"({"T": 20, "trials": 6, "split": [4, 1, 1]})";
  ASSERT_EQ(run_cli("generate --system fn --config " + (dir / "fn.json").string() + " --out " + (dir / "data").string()), 0);
  Json run = small_run(dir / "run", 2);
  run["data"] = Json{{"path", (dir / "data").string()}};
  std::ofstream(dir / "run.json") << run.dump();
  ASSERT_EQ(run_cli("train --config " + (dir / "run.json").string()), 0);
  const auto ckpt = (dir / "run" / "checkpoint_final.json").string();
  ASSERT_EQ(run_cli("eval --checkpoint " + ckpt + " --data " + (dir / "data").string() +
                    " --kmax 5 --K 4 --M 2 --split val --out " + (dir / "eval").string()),
            0);
  EXPECT_TRUE(std::filesystem::exists(dir / "eval" / "rollout.csv"));
  ASSERT_EQ(run_cli("snr --checkpoint " + ckpt + " --data " + (dir / "data").string() +
                    " --kgrid 2,4 --estimators biased,categorical --n 4 --out " + (dir / "snr").string()),
            0);
  const Json snr = read_json(dir / "snr" / "snr.json");
  EXPECT_TRUE(snr.contains("slopes"));
}
