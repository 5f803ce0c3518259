#include <gtest/gtest.h>

#include <algorithm>

#include "uasml/uq.hpp"

using namespace uasml;

namespace {

// Two relu units r(a.x) - r(-a.x) reproduce the linear map a.x exactly.
MlpModel linear_member(double input_gain, double feedback) {
  MlpModel m = init_mlp(MlpSpec::uniform(5, {2}, Activation::relu), 1);
  Eigen::RowVectorXd a(5);
  a << input_gain, 0.0, 0.0, 0.0, feedback;
  m.layers[0].W.row(0) = a;
  m.layers[0].W.row(1) = -a;
  m.layers[0].b.setZero();
  m.layers[1].W << 1.0, -1.0;
  m.layers[1].b.setZero();
  for (auto* s : {&m.scalers.features, &m.scalers.target}) {
    const Eigen::Index n = s == &m.scalers.features ? 5 : 1;
    s->min = Eigen::VectorXd::Constant(n, -1.0);
    s->max = Eigen::VectorXd::Constant(n, 1.0);
  }
  return m;
}

EnsembleModel ensemble_of(const std::vector<MlpModel>& models) {
  EnsembleModel e;
  e.target = "T";
  e.narx.input_lags = 1;
  e.narx.output_lags = 1;
  for (std::size_t i = 0; i < models.size(); ++i) {
    Member m;
    m.row = i;
    m.model = models[i];
    e.members.push_back(m);
  }
  return e;
}

// T_k = 0.5 T_{k-1} + g Qi_k with Qi alternating between two levels.
Trajectory linear_trajectory(double g, std::size_t n = 40) {
  Trajectory tr;
  double T = 0.2;
  for (std::size_t k = 0; k < n; ++k) {
    const double qi = (k / 5) % 2 ? 0.3 : -0.4;
    if (k > 0) T = 0.5 * T + g * qi;
    tr.times.push_back(static_cast<double>(k));
    tr.inputs.push_back({qi, 0.0, 0.0, 0.0});
    ReactorState s{};
    s.T = T;
    tr.states.push_back(s);
    tr.outputs.push_back({});
  }
  return tr;
}

MemberPredictions raw_predictions(const Eigen::MatrixXd& v) {
  MemberPredictions p;
  p.values = v;
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    p.times.push_back(static_cast<double>(c));
    p.sample_index.push_back(static_cast<std::size_t>(c));
  }
  for (Eigen::Index i = 0; i < v.rows(); ++i) p.rows.push_back(static_cast<std::size_t>(i));
  p.truncated.assign(static_cast<std::size_t>(v.rows()), false);
  return p;
}

PredictionBand constant_band(std::size_t n, double lo, double hi) {
  PredictionBand b;
  for (std::size_t k = 0; k < n; ++k) {
    b.times.push_back(static_cast<double>(k));
    b.lower.push_back(lo);
    b.upper.push_back(hi);
    b.center.push_back(0.5 * (lo + hi));
  }
  return b;
}

}  // namespace

TEST(OneStep, ExactMemberReproducesTarget) {
  const auto tr = linear_trajectory(0.1);
  const auto e = ensemble_of({linear_member(0.1, 0.5), linear_member(0.1, 0.5), linear_member(0.2, 0.5)});
  const auto p = one_step_predict(e, tr);
  ASSERT_EQ(p.members(), 3u);
  ASSERT_EQ(p.samples(), tr.size() - 1);
  for (std::size_t c = 0; c < p.samples(); ++c) {
    EXPECT_NEAR(p.values(0, static_cast<Eigen::Index>(c)), tr.states[c + 1].T, 1e-12);
    EXPECT_EQ(p.values(0, static_cast<Eigen::Index>(c)), p.values(1, static_cast<Eigen::Index>(c)));
  }
  EXPECT_NE(p.values(2, 0), p.values(0, 0));
  EXPECT_THROW(one_step_predict(e, linear_trajectory(0.1, 1)), std::invalid_argument);
}

TEST(OneStep, EachMemberUsesItsOwnTrajectory) {
  EnsembleDataset data;
  data.rows = {7, 3};
  data.trajectories = {linear_trajectory(0.1), linear_trajectory(0.2)};
  auto e = ensemble_of({linear_member(0.2, 0.5), linear_member(0.1, 0.5)});
  e.members[0].row = 3;
  e.members[1].row = 7;
  const auto p = one_step_predict(e, data);
  EXPECT_EQ(p.rows, (std::vector<std::size_t>{3, 7}));
  EXPECT_NEAR(p.values(0, 10), data.trajectories[1].states[11].T, 1e-12);
  EXPECT_NEAR(p.values(1, 10), data.trajectories[0].states[11].T, 1e-12);
  const auto [sse, n] = member_residual_sse(p, data, "T");
  EXPECT_LT(sse, 1e-20);
  EXPECT_EQ(n, 2.0 * static_cast<double>(p.samples()));
  e.members[1].row = 99;
  EXPECT_THROW(one_step_predict(e, data), std::invalid_argument);
}

TEST(FreeRun, MatchesHandRecursion) {
  const auto tr = linear_trajectory(0.1);
  const auto e = ensemble_of({linear_member(0.1, 0.5), linear_member(0.3, 0.8)});
  const auto p = free_run_simulate(e, tr);
  double y = tr.states[0].T;
  for (std::size_t k = 1; k < tr.size(); ++k) {
    y = 0.8 * y + 0.3 * tr.inputs[k][0];
    EXPECT_NEAR(p.values(0, static_cast<Eigen::Index>(k - 1)), tr.states[k].T, 1e-12);
    EXPECT_NEAR(p.values(1, static_cast<Eigen::Index>(k - 1)), y, 1e-12);
  }
  EXPECT_EQ(p.truncated, (std::vector<bool>{false, false}));
}

TEST(FreeRun, MeasuredLagsReduceToOneStep) {
  // With one step simulated from measured lags, both forms agree.
  const auto tr = linear_trajectory(0.1);
  const auto e = ensemble_of({linear_member(0.25, 0.6), linear_member(0.05, 0.1)});
  const auto one = one_step_predict(e, tr);
  for (std::size_t k = 1; k + 1 < tr.size(); k += 7) {
    Trajectory pair;
    for (std::size_t j : {k - 1, k}) {
      pair.times.push_back(tr.times[j]);
      pair.inputs.push_back(tr.inputs[j]);
      pair.states.push_back(tr.states[j]);
      pair.outputs.push_back(tr.outputs[j]);
    }
    const auto fr = free_run_simulate(e, pair);
    for (Eigen::Index i = 0; i < 2; ++i) EXPECT_EQ(fr.values(i, 0), one.values(i, static_cast<Eigen::Index>(k - 1)));
  }
}

TEST(FreeRun, DivergentMembersAreTruncatedAndFlagged) {
  const auto tr = linear_trajectory(0.1, 80);
  const auto e = ensemble_of({linear_member(0.1, 0.5), linear_member(0.1, 1.5)});
  const auto p = free_run_simulate(e, tr);
  EXPECT_FALSE(p.truncated[0]);
  EXPECT_TRUE(p.truncated[1]);
  EXPECT_TRUE(p.values.row(0).allFinite());
  EXPECT_FALSE(std::isfinite(p.values(1, p.values.cols() - 1)));
  for (Eigen::Index c = 0; c < p.values.cols(); ++c)
    if (std::isfinite(p.values(1, c))) {
      EXPECT_LE(std::abs(p.values(1, c)), 10.0);
    }
  EXPECT_THROW(free_run_simulate(ensemble_of({linear_member(0.1, 1.5)}), tr), std::runtime_error);
}

TEST(Epistemic, ConjugateParameters) {
  const auto v = epistemic_variance(3.0, 100);
  EXPECT_EQ(v.alpha, 50.0);
  EXPECT_EQ(v.beta, 1.5);
  EXPECT_EQ(epistemic_variance(2.0, 10, BetaConvention::as_printed).beta, 1.0);
  EXPECT_THROW(epistemic_variance(0.0, 10), std::invalid_argument);
  EXPECT_THROW(epistemic_variance(1.0, 0), std::invalid_argument);

  Engine rng(12);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sum += v.sample(rng);
  EXPECT_NEAR(sum / n / v.mean(), 1.0, 0.02);
  EXPECT_DOUBLE_EQ(v.mean(), 1.5 / 49.0);
}

TEST(Band, IdenticalMembersGiveZeroWidth) {
  const auto b = prediction_band(raw_predictions(Eigen::MatrixXd::Constant(4, 6, 2.5)));
  for (std::size_t k = 0; k < b.size(); ++k) {
    EXPECT_EQ(b.lower[k], 2.5);
    EXPECT_EQ(b.upper[k], 2.5);
  }
  EXPECT_EQ(b.sources, (std::vector<std::string>{"ensemble_spread"}));
  EXPECT_THROW(prediction_band(raw_predictions(Eigen::MatrixXd::Zero(1, 3))), std::invalid_argument);
}

TEST(Band, NormalMembersGiveNormalQuantiles) {
  Engine rng(21);
  Eigen::MatrixXd v(10000, 3);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = standard_normal(rng);
  const auto b = prediction_band(raw_predictions(v));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(b.lower[k], -1.959964, 0.196);
    EXPECT_NEAR(b.upper[k], 1.959964, 0.196);
    EXPECT_LE(b.lower[k], b.center[k]);
    EXPECT_LE(b.center[k], b.upper[k]);
  }
}

TEST(Band, QuantilesAndLevelMonotone) {
  Engine rng(5);
  Eigen::MatrixXd v(37, 8);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = uniform01(rng);
  const auto p = raw_predictions(v);
  PredictionBand prev;
  for (double level : {0.5, 0.8, 0.9, 0.95, 0.99}) {
    const auto b = prediction_band(p, {level, std::nullopt, 0});
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      std::vector<double> col(v.col(c).data(), v.col(c).data() + v.rows());
      std::sort(col.begin(), col.end());
      // Brute-force linear-interpolation quantile.
      auto q = [&](double f) {
        const double pos = f * 36.0;
        const auto lo = static_cast<std::size_t>(pos);
        return col[lo] + (pos - static_cast<double>(lo)) * (col[std::min<std::size_t>(lo + 1, 36)] - col[lo]);
      };
      const auto k = static_cast<std::size_t>(c);
      EXPECT_DOUBLE_EQ(b.lower[k], q(0.5 - 0.5 * level));
      EXPECT_DOUBLE_EQ(b.upper[k], q(0.5 + 0.5 * level));
      EXPECT_DOUBLE_EQ(b.center[k], col[18]);
      if (prev.size()) {
        EXPECT_LE(b.lower[k], prev.lower[k]);
        EXPECT_GE(b.upper[k], prev.upper[k]);
      }
    }
    prev = b;
  }
}

TEST(Band, EpistemicWideningDoesNotNarrow) {
  Engine rng(8);
  Eigen::MatrixXd v(50, 20);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = 0.1 * standard_normal(rng);
  const auto p = raw_predictions(v);
  const auto base = prediction_band(p);
  auto width = [](const PredictionBand& b) {
    double w = 0;
    for (std::size_t k = 0; k < b.size(); ++k) w += b.upper[k] - b.lower[k];
    return w / static_cast<double>(b.size());
  };
  double widened = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    BandOptions o;
    o.epistemic = epistemic_variance(0.5, 100);  // mean variance about 0.01
    o.seed = seed;
    const auto b = prediction_band(p, o);
    EXPECT_EQ(b.sources.back(), "inverse_gamma");
    widened += width(b);
  }
  EXPECT_GE(widened / 100.0, width(base));
}

TEST(Band, TableLayout) {
  const auto t = band_table(constant_band(3, -1, 1));
  EXPECT_EQ(t.header, (std::vector<std::string>{"time", "center", "lower", "upper"}));
  EXPECT_EQ(t.rows.size(), 3u);
}

TEST(Overlap, IdenticalDisjointAndSymmetric) {
  const auto a = constant_band(10, 0, 1);
  EXPECT_EQ(overlap_validate(a, a).fraction, 1.0);
  EXPECT_TRUE(overlap_validate(a, a).pass);
  const auto far = constant_band(10, 2, 3);
  EXPECT_EQ(overlap_validate(a, far).fraction, 0.0);
  EXPECT_FALSE(overlap_validate(a, far).pass);

  auto partial = constant_band(10, 0.5, 2);
  for (std::size_t k = 0; k < 3; ++k) partial.lower[k] = 1.5;
  const auto ab = overlap_validate(a, partial), ba = overlap_validate(partial, a);
  EXPECT_EQ(ab.fraction, 0.7);
  EXPECT_EQ(ab.fraction, ba.fraction);
  EXPECT_EQ(ab.pass, ba.pass);
  EXPECT_TRUE(overlap_validate(a, partial, 0.7).pass);

  EXPECT_THROW(overlap_validate(a, constant_band(9, 0, 1)), std::invalid_argument);
}

TEST(Overlap, RestrictionToBlocks) {
  InputSchedule s;
  s.hold_duration = 10.0;
  s.step_levels.assign(4, ReactorInputs{});
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(2, 40);
  auto p = raw_predictions(v);
  const auto r = p.restricted(s, {1, 3});
  EXPECT_EQ(r.samples(), 20u);
  EXPECT_EQ(r.times.front(), 10.0);
  EXPECT_EQ(r.times.back(), 39.0);
}
