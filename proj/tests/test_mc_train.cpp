#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "uasml/mc_train.hpp"

using namespace uasml;

namespace {

// Ten 50 h blocks sampled every 5 h; T follows Qi through a first-order lag
// whose gain depends on the trajectory.
EnsembleDataset toy_ensemble(std::size_t m) {
  EnsembleDataset ds;
  ds.schedule.hold_duration = 50.0;
  Engine lv(3);
  for (int b = 0; b < 10; ++b)
    ds.schedule.step_levels.push_back({100.0 + 20.0 * uniform01(lv), 400.0 + 40.0 * uniform01(lv),
                                       300.0 + 30.0 * uniform01(lv), 450.0 + 50.0 * uniform01(lv)});
  ds.theta = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(m), 18);
  for (std::size_t r = 0; r < m; ++r) {
    const double gain = 0.1 + 0.01 * static_cast<double>(r);
    ds.theta(static_cast<Eigen::Index>(r), 0) = 1.0 + 0.01 * static_cast<double>(r);
    Trajectory tr;
    double T = 320.0;
    for (int k = 0; k < 100; ++k) {
      const double t = 5.0 * k;
      const auto u = ds.schedule.inputs_at(t);
      tr.times.push_back(t);
      tr.inputs.push_back(u);
      T += 0.3 * (320.0 + gain * (u[0] - 110.0) - T);
      ReactorState s{};
      s.T = T;
      tr.states.push_back(s);
      tr.outputs.push_back({});
    }
    ds.rows.push_back(r);
    ds.trajectories.push_back(std::move(tr));
  }
  split_dataset(ds, {0.7, 0.15, 0.15}, 9);
  return ds;
}

McTrainConfig small_config() {
  McTrainConfig c;
  c.narx.input_lags = 1;
  c.narx.output_lags = 1;
  c.train.max_epochs = 30;
  c.train.patience = 10;
  c.train.batch_size = 16;
  c.seed = 5;
  return c;
}

MlpSpec small_spec(const McTrainConfig& c) {
  return MlpSpec::uniform(c.narx.features(), {6}, Activation::tanh, 1e-2);
}

bool same_weights(const MlpModel& a, const MlpModel& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    if (a.layers[l].W != b.layers[l].W || a.layers[l].b != b.layers[l].b) return false;
  return true;
}

}  // namespace

TEST(McTraining, SingleMemberMatchesDirectTraining) {
  const auto data = toy_ensemble(1);
  const auto cfg = small_config();
  const auto e = mc_training(data, small_spec(cfg), cfg, "T");
  ASSERT_EQ(e.size(), 1u);

  const auto ds = build_regressors(data.trajectories[0], "T", cfg.narx, data.schedule, data.split);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "mc-train", 0);
  const auto model = train(init_mlp(small_spec(cfg), derive_seed(cfg.seed, "mc-init", 0)), ds, tc);
  EXPECT_TRUE(same_weights(model, e.members[0].model));
  const auto test = split_metrics(model, ds, ds.test);
  EXPECT_EQ(e.members[0].test.mse, test.mse);
  EXPECT_EQ(e.members[0].test.mae, test.mae);

  const auto s = summarize(e);
  EXPECT_EQ(s.test_mse.min, s.test_mse.max);
  EXPECT_EQ(s.test_mse.median, test.mse);
  EXPECT_EQ(s.test_mse.std, 0.0);
}

TEST(McTraining, MembersAreIndependentOfOrderAndNeighbours) {
  const auto data = toy_ensemble(4);
  const auto cfg = small_config();
  const auto spec = small_spec(cfg);
  const auto e = mc_training(data, spec, cfg, "T");
  ASSERT_EQ(e.size(), 4u);
  for (std::size_t k : {3u, 1u, 0u, 2u}) {
    const auto alone = train_member(data, k, spec, cfg, "T");
    EXPECT_EQ(alone.row, data.rows[k]);
    EXPECT_TRUE(same_weights(alone.model, e.members[k].model)) << "member " << k;
  }
  EXPECT_FALSE(same_weights(e.members[0].model, e.members[1].model));
  for (const auto& m : e.members) {
    EXPECT_GE(m.model.epochs_trained, 1u);
    EXPECT_LE(m.model.epochs_trained, cfg.train.max_epochs);
  }
}

TEST(McTraining, InputWidthMismatchIsRejected) {
  const auto data = toy_ensemble(1);
  const auto cfg = small_config();
  EXPECT_THROW(mc_training(data, MlpSpec::uniform(3, {4}, Activation::relu), cfg, "T"), std::invalid_argument);
}

TEST(McTraining, DivergedMembersAbortWithRowList) {
  auto data = toy_ensemble(3);
  auto T = data.trajectories[1].channel("T");
  std::fill(T.begin() + 1, T.end(), std::numeric_limits<double>::quiet_NaN());
  data.trajectories[1].set_channel("T", T);
  const auto cfg = small_config();
  try {
    mc_training(data, small_spec(cfg), cfg, "T");
    FAIL() << "expected an abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("diverged: 1"), std::string::npos) << e.what();
  }
}

TEST(Summary, MedianAndBruteForce) {
  EnsembleModel e;
  for (double v : {3.0, 1.0, 2.0}) {
    Member m;
    m.test.mse = v;
    m.test.mae = 10 * v;
    m.validation.mse = v;
    m.model.epochs_trained = static_cast<std::size_t>(v * 10);
    e.members.push_back(m);
  }
  const auto s = summarize(e);
  EXPECT_EQ(s.test_mse.median, 2.0);
  EXPECT_EQ(s.test_mse.min, 1.0);
  EXPECT_EQ(s.test_mse.max, 3.0);
  EXPECT_NEAR(s.test_mse.std, 1.0, 1e-15);
  EXPECT_EQ(s.test_mae.median, 20.0);
  EXPECT_EQ(s.epochs.max, 30.0);
  EXPECT_THROW(summarize(EnsembleModel{}), std::invalid_argument);
}

TEST(Summary, HistogramCountsEverySample) {
  const std::vector<double> v{0.0, 0.1, 0.5, 0.9, 1.0, 1.0};
  const auto h = histogram(v, 4);
  ASSERT_EQ(h.rows.size(), 4u);
  double total = 0;
  for (const auto& r : h.rows) total += r[2];
  EXPECT_EQ(total, 6.0);
  EXPECT_EQ(h.rows[3][2], 3.0);  // 0.9, 1.0, 1.0 (max lands in the last bin)
  EXPECT_EQ(h.rows.front()[0], 0.0);
  EXPECT_EQ(h.rows.back()[1], 1.0);
}

TEST(Summary, PersistedModelReproducesStatistics) {
  const auto data = toy_ensemble(3);
  const auto cfg = small_config();
  const auto e = mc_training(data, small_spec(cfg), cfg, "T");
  const auto dir = std::filesystem::temp_directory_path() / "uasml_mc_roundtrip";
  std::filesystem::remove_all(dir);
  write_ensemble_model(e, dir);
  const auto back = read_ensemble_model(dir);
  ASSERT_EQ(back.size(), e.size());
  EXPECT_EQ(back.spec, e.spec);
  EXPECT_EQ(back.narx.input_lags, 1u);
  for (std::size_t k = 0; k < e.size(); ++k) {
    EXPECT_EQ(back.members[k].row, e.members[k].row);
    EXPECT_EQ(back.members[k].test.mse, e.members[k].test.mse);
    EXPECT_EQ(back.members[k].validation.mae, e.members[k].validation.mae);
    EXPECT_TRUE(same_weights(back.members[k].model, e.members[k].model));
  }
  const auto a = to_json(summarize(e)), b = to_json(summarize(back));
  EXPECT_EQ(a["test"].dump(), b["test"].dump());
  EXPECT_EQ(a["validation"].dump(), b["validation"].dump());
  for (const char* f : {"metrics.csv", "summary.json", "histogram_test_mse.csv", "histogram_epochs.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(metrics_csv(e).substr(0, 26), "member,split,mse,mae,epoch");
  std::filesystem::remove_all(dir);
}

TEST(Spearman, RanksAndTies) {
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 1, 0.5, 0.1}), -1.0, 1e-15);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 9, 8, 100}), 0.8, 1e-12);
  // Tied values get average ranks: ranks (1.5,1.5,3) vs (1,2,3).
  EXPECT_NEAR(spearman({5, 5, 7}, {1, 2, 3}), 0.8660254037844386, 1e-12);
  EXPECT_THROW(spearman({1}, {1}), std::invalid_argument);
}

TEST(DataSize, SizesAreCheckedAndRepeatsRecorded) {
  const auto data = toy_ensemble(3);
  auto cfg = small_config();
  cfg.train.max_epochs = 10;
  cfg.train.patience = 5;
  const auto spec = small_spec(cfg);
  EXPECT_THROW(data_size_study(data, spec, cfg, "T", {1, 4}, 2), std::invalid_argument);
  EXPECT_THROW(data_size_study(data, spec, cfg, "T", {1}, 0), std::invalid_argument);
  const auto s = data_size_study(data, spec, cfg, "T", {1, 3}, 2);
  ASSERT_EQ(s.points.size(), 2u);
  EXPECT_EQ(s.points[1].size, 3u);
  EXPECT_EQ(s.points[0].mse.size(), 2u);
  EXPECT_GE(s.spearman_rho, -1.0);
  EXPECT_LE(s.spearman_rho, 1.0);
  const auto again = data_size_study(data, spec, cfg, "T", {1, 3}, 2);
  EXPECT_EQ(again.points[1].mse, s.points[1].mse);
  EXPECT_EQ(data_size_table(s).header.front(), "experiments");
}
