#pragma once

// Uncertainty propagation through a trained ensemble: member predictions,
// the inverse-gamma epistemic variance, quantile bands and band overlap.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/dram.hpp"
#include "uasml/ensemble.hpp"
#include "uasml/io.hpp"
#include "uasml/mc_train.hpp"
#include "uasml/rng.hpp"

namespace uasml {

/// Unscaled predictions, one row per member. Columns follow `times`; a
/// truncated member holds NaN from the point of divergence on.
struct MemberPredictions {
  std::vector<double> times;
  std::vector<std::size_t> sample_index;  // trajectory sample of each column
  std::vector<std::size_t> rows;          // member theta rows
  Eigen::MatrixXd values;
  std::vector<bool> truncated;

  std::size_t members() const noexcept { return static_cast<std::size_t>(values.rows()); }
  std::size_t samples() const noexcept { return static_cast<std::size_t>(values.cols()); }

  /// Columns whose trajectory sample lies in one of `blocks`.
  MemberPredictions restricted(const InputSchedule& schedule, const std::vector<std::size_t>& blocks) const {
    std::vector<Eigen::Index> keep;
    for (std::size_t c = 0; c < times.size(); ++c)
      if (std::find(blocks.begin(), blocks.end(), schedule.step_at(times[c])) != blocks.end())
        keep.push_back(static_cast<Eigen::Index>(c));
    MemberPredictions out;
    out.rows = rows;
    out.truncated = truncated;
    out.values.resize(values.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
      out.times.push_back(times[static_cast<std::size_t>(keep[i])]);
      out.sample_index.push_back(sample_index[static_cast<std::size_t>(keep[i])]);
      out.values.col(static_cast<Eigen::Index>(i)) = values.col(keep[i]);
    }
    return out;
  }
};

namespace detail {

inline void check_scalers(const MlpModel& m) {
  if (m.scalers.features.size() != static_cast<Eigen::Index>(m.spec.input_dim) || m.scalers.target.size() != 1)
    throw std::invalid_argument("member has no scaler snapshot");
}

}  // namespace detail

/// Every member predicts every sample of `tr` from its measured lags.
inline MemberPredictions one_step_predict(const EnsembleModel& e, const Trajectory& tr) {
  if (e.members.empty()) throw std::invalid_argument("one_step_predict: empty ensemble");
  const auto lag = e.narx.max_lag();
  if (tr.size() <= lag) throw std::invalid_argument("one_step_predict: trajectory shorter than the lags");
  const auto s = series_from_trajectory(tr, e.target);
  MemberPredictions p;
  for (std::size_t k = lag; k < tr.size(); ++k) p.times.push_back(tr.times[k]), p.sample_index.push_back(k);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(p.times.size()), static_cast<Eigen::Index>(e.narx.features()));
  Eigen::RowVectorXd row;
  for (std::size_t c = 0; c < p.times.size(); ++c) {
    narx_features(s.u, s.y, p.sample_index[c], e.narx, row);
    X.row(static_cast<Eigen::Index>(c)) = row;
  }
  p.values.resize(static_cast<Eigen::Index>(e.size()), X.rows());
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto& m = e.members[i].model;
    detail::check_scalers(m);
    const Eigen::VectorXd out = forward(m, m.scalers.features.transform(X));
    p.values.row(static_cast<Eigen::Index>(i)) = m.scalers.target.inverse(out, 0).transpose();
    p.rows.push_back(e.members[i].row);
  }
  p.truncated.assign(e.size(), false);
  return p;
}

/// Each member predicts the ensemble trajectory it was trained on.
inline MemberPredictions one_step_predict(const EnsembleModel& e, const EnsembleDataset& data) {
  MemberPredictions p;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto it = std::find(data.rows.begin(), data.rows.end(), e.members[i].row);
    if (it == data.rows.end())
      throw std::invalid_argument("one_step_predict: no trajectory for member row " + std::to_string(e.members[i].row));
    EnsembleModel single;
    single.target = e.target;
    single.narx = e.narx;
    single.members.push_back(e.members[i]);
    auto one = one_step_predict(single, data.trajectories[static_cast<std::size_t>(it - data.rows.begin())]);
    if (i == 0) {
      p = std::move(one);
      p.values.conservativeResize(static_cast<Eigen::Index>(e.size()), Eigen::NoChange);
    } else {
      if (one.times != p.times) throw std::invalid_argument("one_step_predict: trajectories on different grids");
      p.values.row(static_cast<Eigen::Index>(i)) = one.values.row(0);
      p.rows.push_back(one.rows[0]);
    }
  }
  p.truncated.assign(e.size(), false);
  return p;
}

struct FreeRunOptions {
  double divergence_limit = 10.0;  // on the member's scaled output
};

/// Recursive simulation: member outputs are fed back as output lags. `u`
/// holds one row of inputs per sample; `y_init` supplies the first max_lag
/// outputs. A member whose scaled output exceeds the limit is truncated.
inline MemberPredictions free_run_simulate(const EnsembleModel& e, const std::vector<double>& times,
                                           const Eigen::MatrixXd& u, const Eigen::VectorXd& y_init,
                                           const FreeRunOptions& opt = {}) {
  if (e.members.empty()) throw std::invalid_argument("free_run_simulate: empty ensemble");
  const auto lag = e.narx.max_lag();
  const auto n = times.size();
  if (static_cast<std::size_t>(u.rows()) != n) throw std::invalid_argument("free_run_simulate: inputs do not match times");
  if (static_cast<std::size_t>(y_init.size()) < lag) throw std::invalid_argument("free_run_simulate: initial lag window too short");
  if (n <= lag) throw std::invalid_argument("free_run_simulate: nothing to simulate");
  MemberPredictions p;
  for (std::size_t k = lag; k < n; ++k) p.times.push_back(times[k]), p.sample_index.push_back(k);
  p.values.setConstant(static_cast<Eigen::Index>(e.size()), static_cast<Eigen::Index>(n - lag),
                       std::numeric_limits<double>::quiet_NaN());
  p.truncated.assign(e.size(), false);
  std::size_t alive = 0;
  Eigen::RowVectorXd row;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto& m = e.members[i].model;
    detail::check_scalers(m);
    p.rows.push_back(e.members[i].row);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    y.head(static_cast<Eigen::Index>(lag)) = y_init.head(static_cast<Eigen::Index>(lag));
    for (std::size_t k = lag; k < n; ++k) {
      narx_features(u, y, k, e.narx, row);
      const double scaled = forward(m, m.scalers.features.transform(row))[0];
      if (!std::isfinite(scaled) || std::abs(scaled) > opt.divergence_limit) {
        p.truncated[i] = true;
        break;
      }
      y[static_cast<Eigen::Index>(k)] = m.scalers.target.inverse(scaled, 0);
      p.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k - lag)) = y[static_cast<Eigen::Index>(k)];
    }
    if (!p.truncated[i]) ++alive;
  }
  if (alive == 0) throw std::runtime_error("free_run_simulate: every member diverged");
  return p;
}

/// Free run driven by a trajectory's inputs, started from its first outputs.
inline MemberPredictions free_run_simulate(const EnsembleModel& e, const Trajectory& tr,
                                           const FreeRunOptions& opt = {}) {
  const auto s = series_from_trajectory(tr, e.target);
  return free_run_simulate(e, tr.times, s.u, s.y.head(static_cast<Eigen::Index>(std::min<std::size_t>(e.narx.max_lag(), tr.size()))), opt);
}

// ---------------------------------------------------------------------------
// Epistemic variance

struct EpistemicVariance {
  double alpha = 0.0;
  double beta = 0.0;  // inverse-gamma scale, or the as-printed gamma scale 2/SSE
  BetaConvention convention = BetaConvention::standard;

  double mean() const {
    if (!(alpha > 1)) return std::numeric_limits<double>::infinity();
    return convention == BetaConvention::standard ? beta / (alpha - 1.0) : 1.0 / (beta * (alpha - 1.0));
  }
  double sample(Engine& rng) const {
    if (convention == BetaConvention::standard) return sample_inverse_gamma(alpha, beta, rng);
    return 1.0 / std::gamma_distribution<double>(alpha, beta)(rng);
  }
};

/// Non-informative conjugate posterior of the output variance: alpha = N/2
/// and scale SSE/2 (or beta = 2/SSE as printed).
inline EpistemicVariance epistemic_variance(double sse, double n_data,
                                            BetaConvention convention = BetaConvention::standard) {
  if (!(sse > 0) || !std::isfinite(sse)) throw std::invalid_argument("epistemic_variance: SSE must be positive");
  if (!(n_data >= 1)) throw std::invalid_argument("epistemic_variance: need at least one residual");
  EpistemicVariance v;
  v.alpha = variance_alpha(n_data);
  v.beta = convention == BetaConvention::standard ? variance_scale(sse) : as_printed_beta(sse);
  v.convention = convention;
  return v;
}

/// Residual sum of squares of member predictions against the trajectory
/// each member was trained on, and the number of residuals.
inline std::pair<double, double> member_residual_sse(const MemberPredictions& p, const EnsembleDataset& data,
                                                     const std::string& target) {
  double sse = 0.0, n = 0.0;
  for (std::size_t i = 0; i < p.members(); ++i) {
    const auto it = std::find(data.rows.begin(), data.rows.end(), p.rows[i]);
    if (it == data.rows.end()) throw std::invalid_argument("member_residual_sse: no trajectory for member");
    const auto y = data.trajectories[static_cast<std::size_t>(it - data.rows.begin())].channel(target);
    for (std::size_t c = 0; c < p.samples(); ++c) {
      const double v = p.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      if (!std::isfinite(v)) continue;
      sse += (v - y[p.sample_index[c]]) * (v - y[p.sample_index[c]]);
      n += 1.0;
    }
  }
  return {sse, n};
}

// ---------------------------------------------------------------------------
// Bands

struct PredictionBand {
  std::vector<double> times;
  std::vector<double> center, lower, upper;
  double level = 0.95;
  std::vector<std::string> sources;  // ensemble_spread, inverse_gamma

  std::size_t size() const noexcept { return times.size(); }
};

struct BandOptions {
  double level = 0.95;
  std::optional<EpistemicVariance> epistemic;
  std::uint64_t seed = 0;  // widening draws
};

/// Per-sample empirical quantiles over members. With an epistemic variance,
/// each member draws its own variance and every prediction gets an
/// independent Gaussian perturbation before the quantiles are taken.
inline PredictionBand prediction_band(const MemberPredictions& p, const BandOptions& opt = {}) {
  if (p.members() < 2) throw std::invalid_argument("prediction_band: need at least two members");
  if (!(opt.level > 0 && opt.level < 1)) throw std::invalid_argument("prediction_band: level must be in (0, 1)");
  Eigen::MatrixXd v = p.values;
  PredictionBand b;
  b.level = opt.level;
  b.times = p.times;
  b.sources.push_back("ensemble_spread");
  if (opt.epistemic) {
    b.sources.push_back("inverse_gamma");
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      Engine rng = make_stream(opt.seed, "band-widening", static_cast<std::uint64_t>(i));
      const double sd = std::sqrt(opt.epistemic->sample(rng));
      for (Eigen::Index c = 0; c < v.cols(); ++c) v(i, c) += sd * standard_normal(rng);
    }
  }
  const double lo = 0.5 * (1.0 - opt.level), hi = 0.5 * (1.0 + opt.level);
  std::vector<double> col;
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    col.clear();
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      if (std::isfinite(v(i, c))) col.push_back(v(i, c));
    if (col.size() < 2) throw std::runtime_error("prediction_band: fewer than two live members at t=" + io::format_double(p.times[static_cast<std::size_t>(c)]));
    std::sort(col.begin(), col.end());
    b.center.push_back(quantile_sorted(col, 0.5));
    b.lower.push_back(quantile_sorted(col, lo));
    b.upper.push_back(quantile_sorted(col, hi));
  }
  return b;
}

/// Ensemble trajectories' values of `target` at the given samples, in the
/// same layout as member predictions.
inline MemberPredictions trajectory_values(const EnsembleDataset& data, const std::string& target,
                                           const std::vector<std::size_t>& sample_index) {
  if (data.size() == 0) throw std::invalid_argument("trajectory_values: empty ensemble");
  MemberPredictions p;
  p.sample_index = sample_index;
  for (auto k : sample_index) p.times.push_back(data.trajectories.front().times.at(k));
  p.values.resize(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(sample_index.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto y = data.trajectories[i].channel(target);
    for (std::size_t c = 0; c < sample_index.size(); ++c)
      p.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = y.at(sample_index[c]);
    p.rows.push_back(data.rows[i]);
  }
  p.truncated.assign(data.size(), false);
  return p;
}

inline io::Table band_table(const PredictionBand& b) {
  io::Table t;
  t.header = {"time", "center", "lower", "upper"};
  for (std::size_t k = 0; k < b.size(); ++k) t.rows.push_back({b.times[k], b.center[k], b.lower[k], b.upper[k]});
  return t;
}

// ---------------------------------------------------------------------------
// Overlap validation

struct OverlapReport {
  std::size_t samples = 0;
  std::size_t overlapping = 0;
  double fraction = 0.0;
  double threshold = 0.95;
  bool pass = false;
};

/// Fraction of samples where the two intervals intersect.
inline OverlapReport overlap_validate(const PredictionBand& a, const PredictionBand& b, double threshold = 0.95) {
  if (a.times != b.times) throw std::invalid_argument("overlap_validate: bands are on different time grids");
  if (a.size() == 0) throw std::invalid_argument("overlap_validate: empty bands");
  OverlapReport r;
  r.samples = a.size();
  r.threshold = threshold;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a.lower[k] <= b.upper[k] && b.lower[k] <= a.upper[k]) ++r.overlapping;
  r.fraction = static_cast<double>(r.overlapping) / static_cast<double>(r.samples);
  r.pass = r.fraction >= threshold;
  return r;
}

}  // namespace uasml
