#include <gtest/gtest.h>

#include <filesystem>

#include "uasml/pipeline.hpp"

using namespace uasml;
namespace fs = std::filesystem;

namespace {

ojson tiny_patch() {
  return ojson::parse(R"({
    "excitation": {"steps": 10},
    "mcmc": {"samples": 400, "burn_in": 100},
    "ensemble": {"m": 4},
    "narx": {"max_input_lag": 2, "max_output_lag": 2},
    "tuner": {"min_layers": 1, "max_layers": 1, "neurons": [4], "activations": ["tanh"],
              "learning_rates": [0.01], "max_budget": 3, "eta": 3, "brackets": 1},
    "training": {"max_epochs": 5, "patience": 3},
    "datasize": {"sizes": [1, 2], "repeats": 1}
  })");
}

PipelineConfig tiny_config() { return config_from_json(tiny_patch()); }

void run_tiny(const fs::path& dir) {
  fs::remove_all(dir);
  RunLock lock(dir);
  uasml::Run run(dir, tiny_config());
  try {
    run_all(run);
  } catch (const ValidationFailure&) {
  }
}

std::map<std::string, std::string> artifacts(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "timings.json")
      out[fs::relative(e.path(), root).generic_string()] = io::read_file(e.path());
  return out;
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "uasml_pipeline_tiny";
    run_tiny(root_);
  }
  static fs::path root_;
};

fs::path TinyPipeline::root_;

}  // namespace

TEST(Config, BundledFileIsTheDefaultDump) {
  const auto text = io::read_file(fs::path(UASML_SOURCE_DIR) / "configs/paper-desk.config");
  EXPECT_EQ(text, config_text(PipelineConfig{}));
  EXPECT_EQ(config_text(load_config(fs::path(UASML_SOURCE_DIR) / "configs/paper-desk.config")), text);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(config_from_json(ojson::parse(R"({"mcmc": {"sampels": 10}})")), std::invalid_argument);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"extra": 1})")), std::invalid_argument);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"mcmc": {"samples": "many"}})")), std::invalid_argument);
}

TEST(Config, PartialPatchKeepsOtherDefaults) {
  const auto c = tiny_config();
  EXPECT_EQ(c.excitation.steps, 10u);
  EXPECT_EQ(c.mcmc.samples, 400u);
  EXPECT_EQ(c.excitation.hold_hours, PipelineConfig{}.excitation.hold_hours);
  EXPECT_EQ(c.reactor.steady_flows.Qi, 108.0);
  EXPECT_EQ(config_text(config_from_json(to_json(c))), config_text(c));
}

TEST(Config, PaperScalePreset) {
  const auto c = config_from_json(ojson::parse(R"({"scale": "paper"})"));
  EXPECT_EQ(c.mcmc.samples, 30000u);
  EXPECT_EQ(c.mcmc.burn_in, 5000u);
  EXPECT_EQ(c.ensemble.m, 10000u);
  EXPECT_EQ(c.tuner.space.max_layers, 6u);
  EXPECT_EQ(c.datasize.sizes.back(), 3100u);
  // Explicit keys still override the preset.
  EXPECT_EQ(config_from_json(ojson::parse(R"({"scale": "paper", "ensemble": {"m": 50}})")).ensemble.m, 50u);
}

TEST(Config, MasterSeedDerivesDistinctStageSeeds) {
  PipelineConfig a, b;
  a.seeds.derive_from(42);
  b.seeds.derive_from(42);
  EXPECT_EQ(config_text(a), config_text(b));
  EXPECT_NE(a.seeds.mcmc, a.seeds.ensemble);
  b.seeds.derive_from(43);
  EXPECT_NE(a.seeds.mcmc, b.seeds.mcmc);
}

TEST(Manifest, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Manifest, LockIsExclusive) {
  const auto dir = fs::temp_directory_path() / "uasml_lock_test";
  fs::remove_all(dir);
  {
    RunLock a(dir);
    EXPECT_THROW(RunLock b(dir), std::runtime_error);
  }
  EXPECT_NO_THROW(RunLock c(dir));
  fs::remove_all(dir);
}

TEST(Manifest, MissingUpstreamIsADependencyError) {
  const auto dir = fs::temp_directory_path() / "uasml_missing_upstream";
  fs::remove_all(dir);
  uasml::Run run(dir, tiny_config());
  EXPECT_THROW(run_stage(run, "simulate"), DependencyError);
  EXPECT_THROW(run_stage(run, "nonsense"), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_F(TinyPipeline, EveryStageRecordedAndAuditClean) {
  uasml::Run run(root_, tiny_config());
  for (const auto& [stage, fn] : stages()) {
    ASSERT_TRUE(run.manifest()["stages"].contains(stage)) << stage;
    EXPECT_FALSE(run.manifest()["stages"][stage]["outputs"].empty()) << stage;
  }
  EXPECT_TRUE(run.audit().empty());
  EXPECT_FALSE(fs::exists(root_ / ".lock"));
  EXPECT_TRUE(fs::exists(root_ / "timings.json"));
  const auto inputs = run.manifest()["stages"]["propagate"]["inputs"];
  EXPECT_TRUE(inputs.contains("mcmc/chain.csv"));
  EXPECT_EQ(inputs["mcmc/chain.csv"], run.manifest()["stages"]["mcmc"]["outputs"]["mcmc/chain.csv"]);
  const auto report = read_json(root_ / "validate/report.json");
  EXPECT_TRUE(report.contains("T"));
  EXPECT_TRUE(report.contains("eta"));
  for (const char* f : {"table_parameters.csv", "table_architectures.csv", "table_metrics.csv", "fig_bands_T.csv"})
    EXPECT_TRUE(fs::exists(root_ / "report" / f)) << f;
}

TEST_F(TinyPipeline, RerunIsByteIdentical) {
  const auto other = fs::temp_directory_path() / "uasml_pipeline_tiny_again";
  run_tiny(other);
  const auto a = artifacts(root_), b = artifacts(other);
  EXPECT_EQ(a.size(), b.size());
  for (const auto& [rel, bytes] : a) {
    ASSERT_TRUE(b.count(rel)) << rel;
    EXPECT_EQ(bytes, b.at(rel)) << rel;
  }
  fs::remove_all(other);
}

TEST_F(TinyPipeline, ModifiedUpstreamIsRefusedWithDigest) {
  const auto dir = fs::temp_directory_path() / "uasml_pipeline_tamper";
  fs::remove_all(dir);
  fs::copy(root_, dir, fs::copy_options::recursive);
  uasml::Run run(dir, tiny_config());
  const auto expected = run.manifest()["stages"]["mcmc"]["outputs"]["mcmc/chain.csv"].get<std::string>();
  io::write_file(dir / "mcmc/chain.csv", io::read_file(dir / "mcmc/chain.csv") + "\n");
  try {
    run_stage(run, "propagate");
    FAIL() << "expected a dependency error";
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find(expected), std::string::npos) << e.what();
  }
  fs::remove(dir / "mcmc/chain.csv");
  EXPECT_THROW(run_stage(run, "propagate"), DependencyError);
  EXPECT_EQ(run.audit().size(), 1u);
  fs::remove_all(dir);
}
