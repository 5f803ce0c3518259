#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "uasml/excitation.hpp"

using namespace uasml;

namespace {

bool stratified(const LhsDesign& d) {
  const auto n = static_cast<std::size_t>(d.steps());
  for (Eigen::Index j = 0; j < d.inputs(); ++j) {
    std::vector<int> count(n, 0);
    for (Eigen::Index i = 0; i < d.steps(); ++i) {
      const auto k = lhs_stratum(d.samples(i, j), d.bounds[static_cast<std::size_t>(j)], n);
      if (k >= n) return false;
      ++count[k];
    }
    for (int c : count)
      if (c != 1) return false;
  }
  return true;
}

}  // namespace

TEST(Lhs, SingleStepSpansRange) {
  Engine rng(1);
  const auto d = lhs_sample(1, {{0.0, 1.0}}, rng);
  ASSERT_EQ(d.steps(), 1);
  EXPECT_GE(d.samples(0, 0), 0.0);
  EXPECT_LE(d.samples(0, 0), 1.0);
}

TEST(Lhs, InitiatorFlowStrata) {
  Engine rng(3);
  const auto d = lhs_sample(30, {{91.8, 124.2}}, rng);
  EXPECT_TRUE(stratified(d));
  for (Eigen::Index i = 0; i < 30; ++i) {
    EXPECT_GE(d.samples(i, 0), 91.8);
    EXPECT_LE(d.samples(i, 0), 124.2);
  }
  EXPECT_NEAR(stratum_edge(d.bounds[0], 1, 30) - stratum_edge(d.bounds[0], 0, 30), 1.08, 1e-12);
}

TEST(Lhs, StratificationOverRandomShapes) {
  Engine meta(99);
  std::uniform_int_distribution<std::size_t> n_dist(1, 60), d_dist(1, 6);
  std::uniform_real_distribution<double> lo_dist(-1e3, 1e3), w_dist(1e-3, 1e3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Range> b(d_dist(meta));
    for (auto& r : b) {
      r.lo = lo_dist(meta);
      r.hi = r.lo + w_dist(meta);
    }
    Engine rng(meta());
    ASSERT_TRUE(stratified(lhs_sample(n_dist(meta), b, rng))) << "trial " << trial;
  }
}

TEST(Lhs, InputsAreNearlyUncorrelated) {
  const auto b = bounds_from_steady({108.0, 459.0, 378.0, 471.6}, 0.15);
  double acc = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Engine rng(seed);
    const auto c = correlation_matrix(lhs_sample(30, b, rng));
    acc += mean_abs_off_diagonal(c);
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) {
        if (i == j) continue;
        EXPECT_LT(std::abs(c(i, j)), 0.6);
      }
  }
  EXPECT_LT(acc / 200.0, 0.15);
}

TEST(Lhs, SeedDeterminismAndDegenerateBounds) {
  Engine a(42), b(42);
  EXPECT_EQ(lhs_sample(10, {{0, 1}, {2, 3}}, a).samples, lhs_sample(10, {{0, 1}, {2, 3}}, b).samples);
  Engine rng(0);
  EXPECT_THROW(lhs_sample(5, {{1.0, 1.0}}, rng), std::invalid_argument);
  EXPECT_THROW(lhs_sample(0, {{0.0, 1.0}}, rng), std::invalid_argument);
}

TEST(Bounds, FromSteadyState) {
  const auto b = bounds_from_steady({108.0, 100.0, 1.0, 1.0}, 0.15);
  EXPECT_DOUBLE_EQ(b[0].lo, 91.8);
  EXPECT_DOUBLE_EQ(b[0].hi, 124.2);
  const auto half = bounds_from_steady({100.0, 1.0, 1.0, 1.0}, 0.5);
  EXPECT_DOUBLE_EQ(half[0].lo, 50.0);
  EXPECT_DOUBLE_EQ(half[0].hi, 150.0);
  EXPECT_THROW(bounds_from_steady({1, 1, 1, 1}, 0.0), std::invalid_argument);
  EXPECT_THROW(bounds_from_steady({1, 1, 1, 1}, 1.0), std::invalid_argument);
}

TEST(Correlation, DiagonalAndDuplicatedColumn) {
  Engine rng(8);
  auto d = lhs_sample(12, {{0, 1}, {0, 1}, {0, 1}}, rng);
  d.samples.col(2) = 3.0 * d.samples.col(0).array() + 1.0;
  const auto c = correlation_matrix(d);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_EQ(c(i, i), 1.0);
  EXPECT_NEAR(c(0, 2), 1.0, 1e-12);
  EXPECT_EQ(c(0, 1), c(1, 0));
  d.samples.col(1).setConstant(0.5);
  EXPECT_THROW(correlation_matrix(d), std::invalid_argument);
  EXPECT_THROW(correlation_matrix(Eigen::MatrixXd::Random(2, 2)), std::invalid_argument);
}

TEST(Noise, SigmaFollowsRangeFraction) {
  Trajectory tr;
  const std::size_t n = 10000;
  for (std::size_t k = 0; k < n; ++k) {
    tr.times.push_back(static_cast<double>(k));
    tr.inputs.push_back({1, 2, 3, 4});
    ReactorState s{};
    s.T = 300.0 + 10.0 * static_cast<double>(k % 2);  // range 10
    tr.states.push_back(s);
    tr.outputs.push_back({});
  }
  Engine rng(17);
  const auto noisy = add_noise(tr, {"T"}, 0.1, rng);
  std::vector<double> e(n);
  for (std::size_t k = 0; k < n; ++k) e[k] = noisy.states[k].T - tr.states[k].T;
  const double mean = std::accumulate(e.begin(), e.end(), 0.0) / n;
  double var = 0.0, lag1 = 0.0;
  for (std::size_t k = 0; k < n; ++k) var += (e[k] - mean) * (e[k] - mean);
  for (std::size_t k = 1; k < n; ++k) lag1 += (e[k] - mean) * (e[k - 1] - mean);
  EXPECT_NEAR(std::sqrt(var / (n - 1)), 1.0, 0.05);
  EXPECT_LT(std::abs(lag1 / var), 0.05);
  EXPECT_EQ(noisy.times, tr.times);
  EXPECT_EQ(noisy.inputs, tr.inputs);

  Engine tiny(17);
  const auto quiet = add_noise(tr, {"T"}, 1e-15, tiny);
  for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(quiet.states[k].T, tr.states[k].T, 1e-9);
}

TEST(Noise, ConstantSeriesAndDecibels) {
  Trajectory tr;
  for (int k = 0; k < 3; ++k) {
    tr.times.push_back(k);
    tr.inputs.push_back({1, 1, 1, 1});
    tr.states.push_back({0, 0, 300, 300, 0, 0, 0});
    tr.outputs.push_back({});
  }
  Engine rng(1);
  EXPECT_THROW(add_noise(tr, {"T"}, 0.1, rng), std::invalid_argument);
  EXPECT_DOUBLE_EQ(amplitude_ratio_to_db(0.1), -20.0);
}

TEST(Schedule, CsvRoundTrip) {
  Engine rng(4);
  const auto s = to_schedule(lhs_sample(30, bounds_from_steady({108, 459, 378, 471.6}, 0.15), rng),
                             150.0);
  EXPECT_DOUBLE_EQ(s.duration(), 4500.0);
  const auto t = io::Table::from_csv(schedule_table(s).to_csv());
  const auto back = schedule_from_table(t, 150.0);
  EXPECT_EQ(back.step_levels, s.step_levels);
  EXPECT_EQ(t.header.front(), "step_index");
}
