#include <gtest/gtest.h>

#include <filesystem>

#include "uasml/narx.hpp"

using namespace uasml;

namespace {

// y_k = 0.5 y_{k-1} + u_{k-1}, u uniform white noise.
SeriesData linear_oracle(std::size_t n, std::uint64_t seed) {
  Engine rng(seed);
  SeriesData d;
  d.u.resize(static_cast<Eigen::Index>(n), 1);
  d.y.resize(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) d.u(static_cast<Eigen::Index>(k), 0) = 2.0 * uniform01(rng) - 1.0;
  d.y[0] = 0.0;
  for (Eigen::Index k = 1; k < static_cast<Eigen::Index>(n); ++k) d.y[k] = 0.5 * d.y[k - 1] + d.u(k - 1, 0);
  return standardized(d);
}

Trajectory ramp_trajectory(std::size_t n) {
  Trajectory tr;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = 5.0 * static_cast<double>(k);
    tr.times.push_back(t);
    tr.inputs.push_back({100.0 + t, 400.0 + 0.5 * t, 300.0 - 0.1 * t, 450.0 + std::sin(t)});
    ReactorState s{};
    s.T = 320.0 + std::sin(0.1 * t) + 0.01 * t;
    tr.states.push_back(s);
    tr.outputs.push_back({});
  }
  return tr;
}

InputSchedule five_blocks() {
  InputSchedule s;
  s.hold_duration = 50.0;
  s.step_levels.assign(5, ReactorInputs{100.0, 400.0, 300.0, 450.0});
  return s;
}

}  // namespace

TEST(Lipschitz, ConstantOutputGivesZero) {
  SeriesData d = linear_oracle(200, 1);
  d.y.setConstant(3.0);
  EXPECT_EQ(lipschitz_index(d, 1, 1), 0.0);
}

TEST(Lipschitz, DuplicateRegressorsAreSkippedButAllDuplicatesFail) {
  SeriesData d;
  d.u = Eigen::MatrixXd::Zero(100, 1);
  d.y = Eigen::VectorXd::Zero(100);
  EXPECT_THROW(lipschitz_index(d, 1, 1), std::invalid_argument);
  EXPECT_THROW(lipschitz_index(linear_oracle(200, 1), 0, 0), std::invalid_argument);
}

TEST(Lipschitz, LinearOracleDropsAtTrueOrder) {
  const auto d = linear_oracle(500, 7);
  EXPECT_GE(lipschitz_index(d, 0, 1) / lipschitz_index(d, 1, 1), 10.0);
  // Without the sqrt factor the index is nearly flat past the true order.
  LipschitzOptions raw;
  raw.scale_by_sqrt_lags = false;
  const double q01 = lipschitz_index(d, 0, 1, raw), q11 = lipschitz_index(d, 1, 1, raw),
               q22 = lipschitz_index(d, 2, 2, raw);
  EXPECT_GE(q01 / q11, 10.0);
  EXPECT_LT(std::abs(q22 - q11) / q11, 0.2);
  EXPECT_NEAR(lipschitz_index(d, 2, 2), 2.0 * q22, 1e-12);
}

TEST(Lipschitz, SurfaceCellsMatchDirectCalls) {
  const auto d = linear_oracle(300, 3);
  LipschitzOptions opt;
  const auto s = lipschitz_surface(d, 3, 2, opt);
  EXPECT_EQ(s.q.rows(), 4);
  EXPECT_EQ(s.q.cols(), 3);
  EXPECT_TRUE(std::isnan(s(0, 0)));
  opt.first_row = 3;
  for (auto [a, b] : {std::pair<std::size_t, std::size_t>{0, 1}, {2, 2}, {3, 0}})
    EXPECT_EQ(s(a, b), lipschitz_index(d, a, b, opt));
  const auto csv = s.to_table();
  EXPECT_EQ(csv.rows.size(), 12u);
}

TEST(Lipschitz, MonotoneAlongOutputLagForLinearOracle) {
  LipschitzOptions raw;
  raw.scale_by_sqrt_lags = false;
  const auto s = lipschitz_surface(linear_oracle(400, 11), 3, 4, raw);
  for (std::size_t a = 0; a <= 3; ++a)
    for (std::size_t b = 1; b < 4; ++b) EXPECT_LE(s(a, b + 1), s(a, b) * (1 + 1e-12)) << a << "," << b;
}

TEST(Lipschitz, SubsampledPairsAreDeterministic) {
  const auto d = linear_oracle(800, 5);
  LipschitzOptions opt;
  opt.max_pairs = 20000;
  opt.pair_seed = 4;
  EXPECT_EQ(lipschitz_index(d, 2, 1, opt), lipschitz_index(d, 2, 1, opt));
  opt.pair_seed = 5;
  const double other = lipschitz_index(d, 2, 1, opt);
  opt.max_pairs = 1000000;
  EXPECT_NEAR(other, lipschitz_index(d, 2, 1, opt), 0.1 * other);
}

TEST(LagSelection, LinearOracleSelectsTrueOrder) {
  const auto cfg = select_lags(lipschitz_surface(linear_oracle(500, 7), 5, 4));
  EXPECT_EQ(cfg.input_lags, 1u);
  EXPECT_EQ(cfg.output_lags, 1u);
}

TEST(LagSelection, FlatSurfaceSelectsMinimalConfig) {
  LipschitzSurface s;
  s.q = Eigen::MatrixXd::Constant(4, 4, 2.0);
  const auto cfg = select_lags(s);
  EXPECT_EQ(cfg.input_lags, 0u);
  EXPECT_EQ(cfg.output_lags, 1u);
}

TEST(LagSelection, NeverFlatteningIsAnError) {
  LipschitzSurface s;
  s.q.resize(4, 4);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) s.q(a, b) = std::pow(0.5, a + b);
  EXPECT_THROW(select_lags(s), std::runtime_error);
  const auto sel = select_lags_per_axis(s);
  EXPECT_FALSE(sel.input_lag.has_value());
}

TEST(Regressors, FeatureLayoutAndBlockStarts) {
  const auto tr = ramp_trajectory(50);
  const auto sched = five_blocks();
  BlockSplit split{{0, 1, 2}, {3}, {4}};
  NarxConfig cfg;  // 4 taps, 2 output lags
  const auto ds = build_regressors(tr, "T", cfg, sched, split);
  EXPECT_EQ(ds.X.cols(), 18);
  // 10 samples per block, first usable row 4 samples in.
  EXPECT_EQ(ds.X.rows(), 5 * 6);
  EXPECT_EQ(ds.sample_index.front(), 4u);
  EXPECT_EQ(ds.sample_index[6], 14u);
  EXPECT_EQ(ds.train.size(), 18u);
  EXPECT_EQ(ds.validation.size(), 6u);
  EXPECT_EQ(ds.test.size(), 6u);

  // Row 0 is sample 4: Qi taps are u_4..u_1, then y_3, y_2.
  const auto& f = ds.scalers.features;
  EXPECT_NEAR(f.inverse(ds.X(0, 0), 0), tr.inputs[4][0], 1e-9);
  EXPECT_NEAR(f.inverse(ds.X(0, 3), 3), tr.inputs[1][0], 1e-9);
  EXPECT_NEAR(f.inverse(ds.X(0, 16), 16), tr.states[3].T, 1e-9);
  EXPECT_NEAR(f.inverse(ds.X(0, 17), 17), tr.states[2].T, 1e-9);

  cfg.include_current_input = false;
  const auto past = build_regressors(tr, "T", cfg, sched, split);
  EXPECT_NEAR(past.scalers.features.inverse(past.X(0, 0), 0), tr.inputs[3][0], 1e-9);
}

TEST(Regressors, ScalersSeeOnlyTrainingRows) {
  const auto tr = ramp_trajectory(50);
  const auto ds = build_regressors(tr, "T", NarxConfig{}, five_blocks(), BlockSplit{{0, 1}, {2}, {3, 4}});
  for (auto r : ds.train) {
    EXPECT_GE(ds.X.row(static_cast<Eigen::Index>(r)).minCoeff(), -1.0 - 1e-12);
    EXPECT_LE(ds.X.row(static_cast<Eigen::Index>(r)).maxCoeff(), 1.0 + 1e-12);
  }
  // Inputs keep growing, so later blocks fall outside the training range.
  EXPECT_GT(ds.X(static_cast<Eigen::Index>(ds.test.back()), 0), 1.0);
  const auto wider = build_regressors(tr, "T", NarxConfig{}, five_blocks(), BlockSplit{{0, 1}, {4}, {2, 3}});
  EXPECT_EQ(ds.scalers.features.min, wider.scalers.features.min);
  EXPECT_EQ(ds.scalers.features.max, wider.scalers.features.max);
  EXPECT_THROW(MinMaxScaler::fit(Eigen::MatrixXd(0, 3)), std::invalid_argument);
}

TEST(Regressors, TargetRoundTrip) {
  const auto tr = ramp_trajectory(50);
  const auto ds = build_regressors(tr, "T", NarxConfig{}, five_blocks(), BlockSplit{{0, 1, 2}, {3}, {4}});
  for (Eigen::Index r = 0; r < ds.y.size(); ++r) {
    const double orig = tr.states[ds.sample_index[static_cast<std::size_t>(r)]].T;
    EXPECT_NEAR(ds.scalers.target.inverse(ds.y[r], 0), orig, 1e-12 * std::abs(orig));
  }
}

TEST(Regressors, NoFeatureReferencesTheTargetOrFuture) {
  // Perturb y at sample k: rows for samples <= k must not change, row k+1 must.
  auto tr = ramp_trajectory(50);
  const auto split = BlockSplit{{0, 1, 2}, {3}, {4}};
  const auto base = build_regressors(tr, "T", NarxConfig{}, five_blocks(), split);
  tr.states[44].T += 5.0;  // test block, so the scalers are unchanged
  const auto moved = build_regressors(tr, "T", NarxConfig{}, five_blocks(), split);
  for (std::size_t r = 0; r < base.sample_index.size() && base.sample_index[r] <= 44; ++r)
    EXPECT_EQ(base.X.row(static_cast<Eigen::Index>(r)), moved.X.row(static_cast<Eigen::Index>(r)));
  const auto next = std::find(base.sample_index.begin(), base.sample_index.end(), 45u) - base.sample_index.begin();
  EXPECT_NE(base.X(next, 16), moved.X(next, 16));
}

TEST(Regressors, PersistedFilesWritten) {
  const auto ds = build_regressors(ramp_trajectory(50), "T", NarxConfig{}, five_blocks(),
                                   BlockSplit{{0, 1, 2}, {3}, {4}});
  const auto dir = std::filesystem::temp_directory_path() / "uasml_narx_io";
  std::filesystem::remove_all(dir);
  write_narx_dataset(ds, dir);
  const auto X = io::read_table(dir / "X.csv");
  EXPECT_EQ(X.rows.size(), 30u);
  EXPECT_EQ(X.rows[3][5], ds.X(3, 5));
  const auto s = nlohmann::json::parse(io::read_file(dir / "scalers.json"));
  EXPECT_EQ(s["feature_min"].size(), 18u);
  std::filesystem::remove_all(dir);
}
