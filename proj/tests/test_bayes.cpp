#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "uasml/coverage.hpp"
#include "uasml/diagnostics.hpp"
#include "uasml/dram.hpp"

using namespace uasml;

namespace {

DramProblem standard_normal_1d() {
  DramProblem p;
  p.target = [](const Eigen::VectorXd& x) { return Evaluation{-0.5 * x.squaredNorm(), {}, true}; };
  p.x0 = Eigen::VectorXd::Constant(1, 0.5);
  p.lower = Eigen::VectorXd::Constant(1, -50.0);
  p.upper = Eigen::VectorXd::Constant(1, 50.0);
  return p;
}

// Twisted Gaussian ("banana") in two dimensions.
DramProblem banana() {
  DramProblem p;
  p.target = [](const Eigen::VectorXd& x) {
    const double a = x[0], b = x[1] + 0.5 * (x[0] * x[0] - 4.0);
    return Evaluation{-0.5 * (a * a / 4.0 + b * b), {}, true};
  };
  p.x0 = Eigen::Vector2d(0.0, 2.0);
  p.lower = Eigen::Vector2d(-30.0, -60.0);
  p.upper = Eigen::Vector2d(30.0, 30.0);
  return p;
}

std::vector<double> column(const Eigen::MatrixXd& m, Eigen::Index j) {
  return {m.col(j).data(), m.col(j).data() + m.rows()};
}

}  // namespace

TEST(VariancePosterior, ShapeAndPrintedBeta) {
  Engine rng(1);
  const auto v = sample_variance_posterior({2.0}, {100.0}, rng);
  EXPECT_EQ(v.alpha[0], 50.0);
  EXPECT_EQ(variance_alpha(100.0), 50.0);
  EXPECT_EQ(as_printed_beta(2.0), 1.0);
  const auto printed = sample_variance_posterior({2.0}, {100.0}, rng, {}, BetaConvention::as_printed);
  EXPECT_EQ(printed.beta[0], 1.0);
  EXPECT_THROW(sample_variance_posterior({0.0}, {10.0}, rng), std::invalid_argument);
  EXPECT_THROW(sample_variance_posterior({1.0}, {0.0}, rng), std::invalid_argument);
}

TEST(VariancePosterior, InverseGammaMean) {
  Engine rng(2024);
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) acc += sample_inverse_gamma(50.0, 50.0, rng);
  EXPECT_NEAR(acc / n, 50.0 / 49.0, 0.02 * 50.0 / 49.0);
}

TEST(VariancePosterior, ConventionsAgreeInDistribution) {
  // beta = 2/SSE as a Gamma scale on the precision is the same law as
  // InvGamma(alpha, SSE/2) on the variance.
  Engine a(5), b(6);
  double ma = 0.0, mb = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    ma += sample_variance_posterior({30.0}, {40.0}, a).phi[0];
    mb += sample_variance_posterior({30.0}, {40.0}, b, {}, BetaConvention::as_printed).phi[0];
  }
  EXPECT_NEAR(ma / n, mb / n, 0.02 * (15.0 / 19.0));
}

TEST(Dram, StandardNormalTarget) {
  DramConfig cfg;
  cfg.n_samples = 21000;
  cfg.burn_in = 1000;
  cfg.seed = 1;
  const auto chain = run_dram(standard_normal_1d(), cfg);
  const auto draws = column(chain.post_burn_in(), 0);
  ASSERT_EQ(draws.size(), 20000u);
  const auto s = chain_stats(chain.post_burn_in())[0];
  EXPECT_LT(std::abs(s.mean), 0.05);
  EXPECT_GE(s.std, 0.93);
  EXPECT_LE(s.std, 1.07);
  EXPECT_LT(ks_statistic(draws, normal_cdf), 0.02);
  const double acc = chain.acceptance_rate();
  EXPECT_GT(acc, 0.01);
  EXPECT_LT(acc, 0.99);
}

TEST(Dram, DelayedRejectionAndAdaptationBeatPlainMetropolis) {
  DramConfig dram;
  dram.n_samples = 20000;
  dram.burn_in = 2000;
  dram.initial_cov = Eigen::Matrix2d::Identity() * 0.01;
  DramConfig plain = dram;
  plain.adapt = false;
  plain.delayed_rejection = false;
  double ess_dram = 0.0, ess_plain = 0.0;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    dram.seed = plain.seed = seed;
    const auto a = run_dram(banana(), dram).post_burn_in();
    const auto b = run_dram(banana(), plain).post_burn_in();
    ess_dram += effective_sample_size(a.col(0)) + effective_sample_size(a.col(1));
    ess_plain += effective_sample_size(b.col(0)) + effective_sample_size(b.col(1));
  }
  EXPECT_GT(ess_dram, ess_plain);
}

TEST(Dram, NeverLeavesTheBox) {
  DramProblem p;
  // Mode outside the box pushes many proposals across the boundary.
  p.target = [](const Eigen::VectorXd& x) {
    return Evaluation{-0.5 * (x.array() - 1.2).square().sum() / 0.01, {}, true};
  };
  p.x0 = Eigen::VectorXd::Ones(3);
  p.lower = Eigen::VectorXd::Constant(3, 0.95);
  p.upper = Eigen::VectorXd::Constant(3, 1.05);
  DramConfig cfg;
  cfg.n_samples = 5000;
  cfg.burn_in = 500;
  cfg.initial_cov_scale = 0.05;
  const auto chain = run_dram(p, cfg);
  EXPECT_GE(chain.draws.minCoeff(), 0.95);
  EXPECT_LE(chain.draws.maxCoeff(), 1.05);
  std::size_t delayed = 0;
  for (auto s : chain.stage) delayed += s == Stage::delayed;
  EXPECT_GT(delayed, 0u);
}

TEST(Dram, ReproducibleAndCsvRoundTrip) {
  DramProblem p = standard_normal_1d();
  // One channel with a variance model: sse = x^2 * 10.
  p.target = [](const Eigen::VectorXd& x) { return Evaluation{0.0, {10.0 * x[0] * x[0] + 1.0}, true}; };
  p.variance.n_data = {20.0};
  p.variance.phi0 = {1.0};
  DramConfig cfg;
  cfg.n_samples = 600;
  cfg.burn_in = 100;
  const auto a = run_dram(p, cfg), b = run_dram(p, cfg);
  EXPECT_EQ(a.draws, b.draws);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_TRUE((a.phi.array() > 0).all());
  const auto text = a.to_table().to_csv();
  EXPECT_EQ(text.substr(0, 45), "draw_index,accepted,stage,log_posterior,p0,ph");
  const auto back = Chain::from_table(io::Table::from_csv(text), 100);
  EXPECT_EQ(back.draws, a.draws);
  EXPECT_EQ(back.phi, a.phi);
  EXPECT_EQ(back.to_table().to_csv(), text);
}

TEST(Dram, FailedEvaluationsAreRejectedNotFatal) {
  DramProblem p = standard_normal_1d();
  p.target = [](const Eigen::VectorXd& x) {
    if (x[0] > 1.0) return Evaluation{0.0, {}, false};
    return Evaluation{-0.5 * x.squaredNorm(), {}, true};
  };
  DramConfig cfg;
  cfg.n_samples = 2000;
  cfg.burn_in = 100;
  const auto chain = run_dram(p, cfg);
  EXPECT_LE(chain.draws.maxCoeff(), 1.0);
  EXPECT_GT(chain.failed_evaluations, 0u);
}

TEST(Dram, RejectsBadConfiguration) {
  DramConfig cfg;
  cfg.n_samples = 10;
  cfg.burn_in = 10;
  EXPECT_THROW(run_dram(standard_normal_1d(), cfg), std::invalid_argument);
  auto p = standard_normal_1d();
  p.x0[0] = 100.0;
  EXPECT_THROW(run_dram(p, DramConfig{}), std::invalid_argument);
}

TEST(Geweke, NullBehaviourOfIndependentChains) {
  int passing = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Engine rng(seed);
    Eigen::VectorXd x(2000);
    for (auto& v : x) v = standard_normal(rng);
    passing += geweke(x).p > 0.05;
  }
  EXPECT_GE(passing, 95);
}

TEST(Geweke, DetectsTrend) {
  Engine rng(3);
  Eigen::VectorXd x(2000);
  for (Eigen::Index i = 0; i < x.size(); ++i)
    x[i] = standard_normal(rng) + 5.0 * static_cast<double>(i) / static_cast<double>(x.size());
  EXPECT_LT(geweke(x).p, 0.01);
  EXPECT_THROW(geweke(Eigen::VectorXd::Ones(500)), std::invalid_argument);
  EXPECT_THROW(geweke(Eigen::VectorXd::Zero(50)), std::invalid_argument);
}

TEST(ChainStats, ConstantAndTwoPoint) {
  const auto c = chain_stats(Eigen::MatrixXd::Ones(10, 2))[1];
  EXPECT_EQ(c.mean, 1.0);
  EXPECT_EQ(c.median, 1.0);
  EXPECT_EQ(c.std, 0.0);
  Eigen::MatrixXd two(2, 1);
  two << 0.9, 1.1;
  const auto s = chain_stats(two)[0];
  EXPECT_DOUBLE_EQ(s.mean, 1.0);
  EXPECT_NEAR(s.std, 0.1414213562373095, 1e-12);
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0, 4.0}), 2.5);
}

TEST(ChainStats, EffectiveSampleSize) {
  Engine rng(9);
  Eigen::VectorXd iid(5000), ar(5000);
  double prev = 0.0;
  for (Eigen::Index i = 0; i < iid.size(); ++i) {
    iid[i] = standard_normal(rng);
    prev = 0.9 * prev + standard_normal(rng);
    ar[i] = prev;
  }
  EXPECT_GT(effective_sample_size(iid), 4000.0);
  // AR(1) with phi 0.9: integrated time (1+phi)/(1-phi) = 19.
  EXPECT_NEAR(effective_sample_size(ar), 5000.0 / 19.0, 100.0);
}

TEST(Coverage, GaussianEllipseOfStandardNormal) {
  Engine rng(77);
  Eigen::MatrixX2d xy(100000, 2);
  for (Eigen::Index i = 0; i < xy.rows(); ++i) xy.row(i) << standard_normal(rng), standard_normal(rng);
  const auto r = coverage_region(xy, 0.95, RegionKind::gaussian_ellipse);
  const double expected = std::sqrt(5.991464547107979);
  EXPECT_NEAR(r.axes[0], expected, 0.03 * expected);
  EXPECT_NEAR(r.axes[1], expected, 0.03 * expected);
  EXPECT_NEAR(enclosed_fraction(r, xy), 0.95, 0.01);
}

TEST(Coverage, PossoloRegionEnclosesLevel) {
  Engine rng(78);
  Eigen::MatrixX2d xy(100000, 2);
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    const double a = standard_normal(rng), b = standard_normal(rng);
    xy.row(i) << 1.0 + 0.01 * a, 2.0 + 0.002 * (0.6 * a + 0.8 * b);
  }
  const auto r = coverage_region(xy, 0.95, RegionKind::possolo_hdr);
  const double f = enclosed_fraction(r, xy);
  EXPECT_GE(f, 0.93);
  EXPECT_LE(f, 0.97);
  // Simple polygon: no two non-adjacent edges cross.
  const auto& p = r.polygon;
  ASSERT_GE(p.size(), 8u);
  auto cross = [](Eigen::Vector2d a, Eigen::Vector2d b, Eigen::Vector2d c) {
    const Eigen::Vector2d u = b - a, v = c - a;
    return u.x() * v.y() - u.y() * v.x();
  };
  const std::size_t n = p.size();
  int intersections = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;
      const auto &a = p[i], &b = p[(i + 1) % n], &c = p[j], &d = p[(j + 1) % n];
      if (cross(a, b, c) * cross(a, b, d) < 0 && cross(c, d, a) * cross(c, d, b) < 0) ++intersections;
    }
  EXPECT_EQ(intersections, 0);
}

TEST(Coverage, SingularPairIsRejected) {
  Engine rng(1);
  Eigen::MatrixX2d xy(500, 2);
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    const double a = standard_normal(rng);
    xy.row(i) << a, 2.0 * a;
  }
  EXPECT_THROW(coverage_region(xy, 0.95, RegionKind::gaussian_ellipse), std::invalid_argument);
  EXPECT_THROW(coverage_region(xy.topRows(100), 0.95, RegionKind::possolo_hdr), std::invalid_argument);
}
