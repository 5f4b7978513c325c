#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mapworld/cli/app.hpp"
#include "mapworld/cli/config.hpp"
#include "mapworld/errors.hpp"

namespace fs = std::filesystem;
using namespace mapworld;
using namespace mapworld::cli;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mapworld_config_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

RunConfig printed(const std::string& text) { return parse(text); }

}  // namespace

TEST(Config, SerializeParseRoundTrip) {
  RunConfig c;
  c.seed = 12345678901ULL;
  c.world.grid_size = 32;
  c.world.cell_size = 0.1 + 0.2;  // not exactly representable in short decimal
  c.model.num_modes = 6;
  c.model.noise_factor = 2.5;
  c.model.positional = false;
  c.world_model.prediction_steps = {4, 8};
  c.loss.weights.wm = 0.0;
  c.loss.detach_weights = true;
  c.train.learning_rate = 3e-4;
  c.train.cosine_schedule = true;
  c.eval.ttc_threshold = 1.5;
  c.paths.run_dir = "runs/x y";
  const std::string text = serialize(c);
  const RunConfig back = parse(text);
  EXPECT_TRUE(back == c);
  EXPECT_EQ(serialize(back), text);
  EXPECT_TRUE(parse(serialize(RunConfig{})) == RunConfig{});
}

TEST(Config, EveryKeyRoundTripsThroughItsAccessors) {
  const RunConfig c;
  std::set<std::string> bare;
  for (const auto& k : config_keys()) {
    EXPECT_TRUE(bare.insert(k.name).second) << "duplicate bare key " << k.name;
    RunConfig copy = c;
    k.set(copy, k.get(c));
    EXPECT_TRUE(copy == c) << k.qualified();
    EXPECT_EQ(find_key(k.name), &k);
    EXPECT_EQ(find_key(k.qualified()), &k);
  }
  EXPECT_EQ(find_key("numModes"), nullptr);
}

TEST(Config, UnknownKeysAndBadValuesNameTheLine) {
  try {
    parse("seed = 1\n[model]\nnumModes = 4\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("numModes"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse("[nonsense]\n"), ConfigError);
  EXPECT_THROW(parse("[model]\nnum_modes = four\n"), ConfigError);
  EXPECT_THROW(parse("[model]\npositional = maybe\n"), ConfigError);
  EXPECT_THROW(parse("[world]\nnum_modes = 4\n"), ConfigError);  // key in the wrong section
  EXPECT_NO_THROW(parse("# comment\n\n[model]\nnum_modes = 4  # trailing\n"));
  EXPECT_EQ(parse("[model]\nnum_modes = 4\n").model.num_modes, 4);
}

TEST(Config, OverridesUseQualifiedOrBareNames) {
  RunConfig c;
  apply_override(c, "num_modes", "3");
  apply_override(c, "model.d", "64");
  EXPECT_EQ(c.model.num_modes, 3);
  EXPECT_EQ(c.model.d, 64);
  EXPECT_THROW(apply_override(c, "numModes", "3"), UsageError);
  EXPECT_THROW(apply_override(c, "num_modes", "x"), ConfigError);
}

TEST(Config, ArchitectureHashIgnoresInferenceNoise) {
  const RunConfig base;
  RunConfig noisy = base;
  noisy.model.noise_factor = 5.0;
  noisy.model.noise_at_inference = true;
  noisy.train.steps = 1;
  noisy.loss.weights.cls = 0.0;
  EXPECT_EQ(architecture_hash(base), architecture_hash(noisy));
  RunConfig wider = base;
  wider.model.d = 64;
  EXPECT_NE(architecture_hash(base), architecture_hash(wider));
  RunConfig steps = base;
  steps.world_model.prediction_steps = {4, 8};
  EXPECT_NE(architecture_hash(base), architecture_hash(steps));
}

TEST(Config, DataRootComesFromTheEnvironment) {
  ::setenv("MAPWORLD_DATA_ROOT", "/tmp/somewhere", 1);
  RunConfig c;
  EXPECT_EQ(c.paths.data_root, "/tmp/somewhere");
  EXPECT_EQ(c.resolve_data("train"), fs::path("/tmp/somewhere/train"));
  EXPECT_EQ(c.resolve_data("/abs/test"), fs::path("/abs/test"));
  ::unsetenv("MAPWORLD_DATA_ROOT");
  EXPECT_EQ(RunConfig{}.paths.data_root, "data");
}

TEST(Config, ValidationRejectsBrokenCombinations) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.model.patch = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.model.num_modes = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.train.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Cli, PrecedenceIsDefaultsThenFileThenFlags) {
  const fs::path dir = temp_dir("precedence");
  write(dir / "a.cfg", "[model]\nnum_modes = 4\nd = 64\n[train]\nsteps = 11\n");
  const auto r = invoke({"train", "--config", (dir / "a.cfg").string(), "--num_modes", "6", "--print-config"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const RunConfig c = printed(r.out);
  EXPECT_EQ(c.model.num_modes, 6);  // flag beats file
  EXPECT_EQ(c.model.d, 64);         // file beats default
  EXPECT_EQ(c.train.steps, 11);
  EXPECT_EQ(c.model.heads, RunConfig{}.model.heads);
  fs::remove_all(dir);
}

TEST(Cli, RunDirectoryConfigSitsBelowExplicitConfig) {
  const fs::path dir = temp_dir("rundir");
  fs::create_directories(dir / "run");
  write(dir / "run" / "config.cfg", "[model]\nd = 24\nnum_modes = 5\n");
  write(dir / "b.cfg", "[model]\nnum_modes = 7\n");
  const auto r = invoke({"eval", "--run", (dir / "run").string(), "--config", (dir / "b.cfg").string(),
                         "--print-config"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const RunConfig c = printed(r.out);
  EXPECT_EQ(c.model.d, 24);
  EXPECT_EQ(c.model.num_modes, 7);
  fs::remove_all(dir);
}

TEST(Cli, UsageErrorsExitTwo) {
  auto r = invoke({"train", "--numModes", "4"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("numModes"), std::string::npos) << r.err;
  r = invoke({"fly"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("fly"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({}).code, kExitUsage);
  EXPECT_EQ(invoke({"train", "--num_modes", "x", "--print-config"}).code, kExitUsage);
  EXPECT_EQ(invoke({"plot", "--run", "/nonexistent"}).code, kExitUsage);  // --out missing
}

TEST(Cli, BadConfigFileFailsWithoutCrashing) {
  const fs::path dir = temp_dir("badfile");
  write(dir / "bad.cfg", "[model]\nnot_a_key = 1\n");
  const auto r = invoke({"train", "--config", (dir / "bad.cfg").string(), "--print-config"});
  EXPECT_NE(r.code, kExitOk);
  EXPECT_NE(r.err.find("not_a_key"), std::string::npos) << r.err;
  EXPECT_NE(invoke({"train", "--config", (dir / "missing.cfg").string(), "--print-config"}).code, kExitOk);
  fs::remove_all(dir);
}

TEST(Cli, GenerateTrainEvaluateEndToEnd) {
  const fs::path dir = temp_dir("e2e");
  const std::vector<std::string> small{"--grid_size", "16", "--cell_size", "2", "--d", "16", "--patch", "4",
                                       "--heads", "2", "--num_modes", "3", "--data_root", dir.string()};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), small.begin(), small.end());
    return invoke(a);
  };
  auto r = with({"generate-data", "--out", "train", "--count", "6", "--split", "train", "--seed", "1"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  r = with({"generate-data", "--out", "test", "--count", "4", "--split", "test", "--seed", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const std::string run_dir = (dir / "run").string();
  r = with({"train", "--train_data", "train", "--eval_data", "test", "--run_dir", run_dir, "--steps", "3",
            "--batch_size", "2"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoints" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.cfg"));
  r = invoke({"eval", "--run", run_dir});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(dir / "run" / "eval_metrics.json"));
  // Evaluating on the training split is refused.
  r = invoke({"eval", "--run", run_dir, "--eval_data", "train"});
  EXPECT_EQ(r.code, kExitFailure);
  // A different architecture cannot load the checkpoint.
  r = invoke({"eval", "--run", run_dir, "--d", "32"});
  EXPECT_EQ(r.code, kExitFailure);
  fs::remove_all(dir);
}
