#pragma once

// NARX regressors: lag selection by the Lipschitz-quotient index of He and
// Asada, and construction of scaled lag-regressor datasets that never reach
// across step-block boundaries.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/ensemble.hpp"
#include "uasml/io.hpp"
#include "uasml/rng.hpp"

namespace uasml {

// ---------------------------------------------------------------------------
// Lipschitz index

struct LipschitzOptions {
  double p_fraction = 0.02;
  std::size_t max_pairs = 200000;  // all pairs up to this count, else a uniform subsample
  std::uint64_t pair_seed = 0;
  bool scale_by_sqrt_lags = true;  // multiply quotients by sqrt(l_u + l_y)
  std::size_t first_row = 0;        // first target sample; raised to the largest lag if smaller
};

/// Input-output record for the index: u is samples x inputs, y has one entry per sample.
struct SeriesData {
  Eigen::MatrixXd u;
  Eigen::VectorXd y;
};

/// Standardizes every column (constant columns are only centred).
inline SeriesData standardized(const SeriesData& d) {
  SeriesData s = d;
  auto zscore = [](Eigen::Ref<Eigen::VectorXd> col) {
    const double m = col.mean();
    const double sd = std::sqrt((col.array() - m).square().sum() / static_cast<double>(col.size()));
    col.array() -= m;
    if (sd > 0) col.array() /= sd;
  };
  for (Eigen::Index j = 0; j < s.u.cols(); ++j) zscore(s.u.col(j));
  zscore(s.y);
  return s;
}

inline SeriesData series_from_trajectory(const Trajectory& tr, const std::string& target) {
  SeriesData d;
  const auto n = static_cast<Eigen::Index>(tr.size());
  d.u.resize(n, static_cast<Eigen::Index>(ReactorInputs::size));
  for (Eigen::Index k = 0; k < n; ++k)
    for (std::size_t i = 0; i < ReactorInputs::size; ++i)
      d.u(k, static_cast<Eigen::Index>(i)) = tr.inputs[static_cast<std::size_t>(k)][i];
  const auto y = tr.channel(target);
  d.y = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
  return d;
}

/// Regressor of sample k: u_{k-1..k-lu} for every input, then y_{k-1..k-ly}.
inline Eigen::MatrixXd lipschitz_regressors(const SeriesData& d, std::size_t lu, std::size_t ly,
                                            std::size_t first_row) {
  const auto n = static_cast<std::size_t>(d.y.size());
  const auto ni = static_cast<std::size_t>(d.u.cols());
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n - first_row), static_cast<Eigen::Index>(lu * ni + ly));
  for (std::size_t k = first_row; k < n; ++k) {
    const auto r = static_cast<Eigen::Index>(k - first_row);
    Eigen::Index c = 0;
    for (std::size_t s = 1; s <= lu; ++s)
      for (std::size_t i = 0; i < ni; ++i) X(r, c++) = d.u(static_cast<Eigen::Index>(k - s), static_cast<Eigen::Index>(i));
    for (std::size_t s = 1; s <= ly; ++s) X(r, c++) = d.y[static_cast<Eigen::Index>(k - s)];
  }
  return X;
}

/// Geometric mean of the largest p_fraction of the quotients
/// |y_i - y_j| / ||x_i - x_j||, each times sqrt(l_u + l_y) unless disabled.
/// Expects already standardized data.
inline double lipschitz_index(const SeriesData& d, std::size_t lu, std::size_t ly,
                              const LipschitzOptions& opt = {}) {
  if (lu + ly == 0) throw std::invalid_argument("lipschitz_index: need at least one lag");
  if (!(opt.p_fraction > 0 && opt.p_fraction <= 1))
    throw std::invalid_argument("lipschitz_index: p_fraction must be in (0,1]");
  const std::size_t first = std::max({opt.first_row, lu, ly});
  const auto n_total = static_cast<std::size_t>(d.y.size());
  if (n_total <= first + 1) throw std::invalid_argument("lipschitz_index: series too short");
  const Eigen::MatrixXd X = lipschitz_regressors(d, lu, ly, first);
  const Eigen::VectorXd t = d.y.tail(static_cast<Eigen::Index>(n_total - first));
  const auto n = static_cast<std::size_t>(t.size());
  const std::size_t all_pairs = n * (n - 1) / 2;
  if (static_cast<double>(all_pairs) * opt.p_fraction < 1.0)
    throw std::invalid_argument("lipschitz_index: too few pairs for p_fraction");

  std::vector<double> q;
  bool any_pair = false;
  auto consider = [&](std::size_t i, std::size_t j) {
    const double dx = (X.row(static_cast<Eigen::Index>(i)) - X.row(static_cast<Eigen::Index>(j))).norm();
    if (!(dx > 0)) return;
    any_pair = true;
    q.push_back(std::abs(t[static_cast<Eigen::Index>(i)] - t[static_cast<Eigen::Index>(j)]) / dx);
  };
  if (all_pairs <= opt.max_pairs) {
    q.reserve(all_pairs);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) consider(i, j);
  } else {
    Engine rng = make_stream(opt.pair_seed, "lipschitz-pairs");
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    q.reserve(opt.max_pairs);
    for (std::size_t s = 0; s < opt.max_pairs; ++s) {
      const auto i = pick(rng), j = pick(rng);
      if (i != j) consider(i, j);
    }
  }
  if (!any_pair) throw std::invalid_argument("lipschitz_index: all regressors coincide");

  const auto keep = static_cast<std::size_t>(std::ceil(opt.p_fraction * static_cast<double>(q.size())));
  std::nth_element(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(keep - 1), q.end(), std::greater<>());
  const double scale = opt.scale_by_sqrt_lags ? std::sqrt(static_cast<double>(lu + ly)) : 1.0;
  double log_sum = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    if (q[i] == 0.0) return 0.0;
    log_sum += std::log(scale * q[i]);
  }
  return std::exp(log_sum / static_cast<double>(keep));
}

struct LipschitzSurface {
  Eigen::MatrixXd q;  // (max_lu + 1) x (max_ly + 1); q(0,0) is undefined (NaN)
  double p_fraction = 0.02;

  std::size_t max_lu() const noexcept { return static_cast<std::size_t>(q.rows() - 1); }
  std::size_t max_ly() const noexcept { return static_cast<std::size_t>(q.cols() - 1); }
  double operator()(std::size_t lu, std::size_t ly) const {
    return q(static_cast<Eigen::Index>(lu), static_cast<Eigen::Index>(ly));
  }

  io::Table to_table() const {
    io::Table t;
    t.header = {"input_lag", "output_lag", "index"};
    for (Eigen::Index a = 0; a < q.rows(); ++a)
      for (Eigen::Index b = 0; b < q.cols(); ++b)
        t.rows.push_back({static_cast<double>(a), static_cast<double>(b), q(a, b)});
    return t;
  }
};

/// Every cell uses the same target samples, starting after the largest lag
/// in the grid, so cells differ only in the regressors.
inline LipschitzSurface lipschitz_surface(const SeriesData& d, std::size_t max_lu, std::size_t max_ly,
                                          LipschitzOptions opt = {}) {
  if (max_lu < 1 || max_ly < 1) throw std::invalid_argument("lipschitz_surface: max lags must be >= 1");
  opt.first_row = std::max({opt.first_row, max_lu, max_ly});
  LipschitzSurface s;
  s.p_fraction = opt.p_fraction;
  s.q = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(max_lu + 1), static_cast<Eigen::Index>(max_ly + 1),
                                  std::numeric_limits<double>::quiet_NaN());
  for (std::size_t a = 0; a <= max_lu; ++a)
    for (std::size_t b = 0; b <= max_ly; ++b)
      if (a + b > 0) s.q(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = lipschitz_index(d, a, b, opt);
  return s;
}

struct NarxConfig {
  std::size_t input_lags = 4;   // taps per input
  std::size_t output_lags = 2;  // y_{k-1} .. y_{k-p}
  bool include_current_input = true;

  std::size_t max_lag() const noexcept { return std::max(input_lags, output_lags); }
  std::size_t features(std::size_t n_inputs = ReactorInputs::size) const noexcept {
    return n_inputs * input_lags + output_lags;
  }
  void validate() const {
    if (output_lags < 1) throw std::invalid_argument("narx: need at least one output lag");
  }
};

/// Relative decrease q[a] - q[a+1] over q[a]; zero when q[a] is zero.
inline double relative_decrease(double from, double to) {
  if (from == 0.0) return 0.0;
  return (from - to) / from;
}

/// Smallest index along a sequence after which every relative decrease stays
/// below the threshold, or nothing if the tail never flattens.
inline std::optional<std::size_t> flattening_point(const std::vector<double>& v, std::size_t start,
                                                   double threshold) {
  if (v.size() < 2) return std::nullopt;
  for (std::size_t a = start; a + 1 < v.size(); ++a) {
    bool flat = true;
    for (std::size_t b = a; b + 1 < v.size(); ++b)
      if (relative_decrease(v[b], v[b + 1]) >= threshold) {
        flat = false;
        break;
      }
    if (flat) return a;
  }
  return std::nullopt;
}

struct LagSelection {
  std::optional<std::size_t> input_lag;   // along the output_lag = 1 row
  std::optional<std::size_t> output_lag;  // along the chosen input-lag column
};

/// Input lag from the y-lag 1 row; output lag from the column at that input lag.
inline LagSelection select_lags_per_axis(const LipschitzSurface& s, double slope_threshold = 0.05) {
  LagSelection out;
  std::vector<double> row;
  for (std::size_t a = 0; a <= s.max_lu(); ++a) row.push_back(s(a, 1));
  out.input_lag = flattening_point(row, 0, slope_threshold);
  if (!out.input_lag) return out;
  std::vector<double> col;
  for (std::size_t b = 0; b <= s.max_ly(); ++b) col.push_back(s(*out.input_lag, b));
  out.output_lag = flattening_point(col, 1, slope_threshold);
  return out;
}

inline NarxConfig select_lags(const LipschitzSurface& s, double slope_threshold = 0.05) {
  const auto sel = select_lags_per_axis(s, slope_threshold);
  if (!sel.input_lag || !sel.output_lag)
    throw std::runtime_error("select_lags: index never flattens within the grid; enlarge the grid");
  NarxConfig c;
  c.input_lags = *sel.input_lag;
  c.output_lags = *sel.output_lag;
  c.include_current_input = false;
  return c;
}

// ---------------------------------------------------------------------------
// Regressor datasets

/// Per-column min-max map onto [-1, 1].
struct MinMaxScaler {
  Eigen::VectorXd min, max;

  static MinMaxScaler fit(const Eigen::MatrixXd& x) {
    if (x.rows() == 0) throw std::invalid_argument("scaler: cannot fit on an empty split");
    MinMaxScaler s;
    s.min = x.colwise().minCoeff().transpose();
    s.max = x.colwise().maxCoeff().transpose();
    return s;
  }
  Eigen::Index size() const noexcept { return min.size(); }

  double span(Eigen::Index j) const { return max[j] > min[j] ? max[j] - min[j] : 1.0; }
  Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.col(j) = 2.0 * (x.col(j).array() - min[j]) / span(j) - 1.0;
    return out;
  }
  double transform(double v, Eigen::Index j) const { return 2.0 * (v - min[j]) / span(j) - 1.0; }
  double inverse(double s, Eigen::Index j) const { return min[j] + 0.5 * (s + 1.0) * span(j); }
  Eigen::VectorXd inverse(const Eigen::VectorXd& s, Eigen::Index j) const {
    return min[j] + 0.5 * (s.array() + 1.0) * span(j);
  }
};

struct NarxScalers {
  MinMaxScaler features;
  MinMaxScaler target;  // one column
};

struct NarxDataset {
  std::string target;
  NarxConfig config;
  Eigen::MatrixXd X;  // scaled
  Eigen::VectorXd y;  // scaled
  std::vector<std::size_t> sample_index;  // trajectory sample of each row
  std::vector<std::size_t> source;        // trajectory of each row (pooled datasets)
  std::vector<std::size_t> train, validation, test;  // row indices
  NarxScalers scalers;

  Eigen::MatrixXd rows_of(const std::vector<std::size_t>& idx) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
    return out;
  }
  Eigen::VectorXd targets_of(const std::vector<std::size_t>& idx) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Eigen::Index>(i)] = y[static_cast<Eigen::Index>(idx[i])];
    return out;
  }
};

/// Unscaled feature row for sample k of a series.
inline void narx_features(const Eigen::MatrixXd& u, const Eigen::VectorXd& y, std::size_t k,
                          const NarxConfig& cfg, Eigen::RowVectorXd& out) {
  out.resize(static_cast<Eigen::Index>(u.cols() * static_cast<Eigen::Index>(cfg.input_lags) + static_cast<Eigen::Index>(cfg.output_lags)));
  Eigen::Index c = 0;
  const std::size_t shift = cfg.include_current_input ? 0 : 1;
  for (Eigen::Index i = 0; i < u.cols(); ++i)
    for (std::size_t s = 0; s < cfg.input_lags; ++s) out[c++] = u(static_cast<Eigen::Index>(k - s - shift), i);
  for (std::size_t s = 1; s <= cfg.output_lags; ++s) out[c++] = y[static_cast<Eigen::Index>(k - s)];
}

/// Unscaled regressor rows of one trajectory. Rows start max_lag samples
/// into each block so no lag reaches into the previous block.
inline void raw_regressors(const Trajectory& tr, const std::string& target, const NarxConfig& cfg,
                           const std::vector<std::size_t>& blocks, Eigen::MatrixXd& X,
                           Eigen::VectorXd& y, std::vector<std::size_t>& sample_index) {
  cfg.validate();
  const auto series = series_from_trajectory(tr, target);
  const auto n = tr.size();
  if (blocks.size() != n) throw std::invalid_argument("narx: block labels do not match trajectory");
  if (n <= cfg.max_lag()) throw std::invalid_argument("narx: trajectory shorter than the lags");
  sample_index.clear();
  std::size_t block_start = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k > 0 && blocks[k] != blocks[k - 1]) block_start = k;
    if (k - block_start >= cfg.max_lag()) sample_index.push_back(k);
  }
  X.resize(static_cast<Eigen::Index>(sample_index.size()), static_cast<Eigen::Index>(cfg.features()));
  y.resize(static_cast<Eigen::Index>(sample_index.size()));
  Eigen::RowVectorXd row;
  for (std::size_t r = 0; r < sample_index.size(); ++r) {
    const auto k = sample_index[r];
    narx_features(series.u, series.y, k, cfg, row);
    X.row(static_cast<Eigen::Index>(r)) = row;
    y[static_cast<Eigen::Index>(r)] = series.y[static_cast<Eigen::Index>(k)];
  }
}

/// Scaled dataset over one or more trajectories sharing a schedule, with
/// scalers fitted on the training blocks only.
inline NarxDataset build_pooled_regressors(const std::vector<const Trajectory*>& trajs,
                                           const std::string& target, const NarxConfig& cfg,
                                           const InputSchedule& schedule, const BlockSplit& split) {
  if (trajs.empty()) throw std::invalid_argument("narx: no trajectories");
  NarxDataset ds;
  ds.target = target;
  ds.config = cfg;
  std::vector<Eigen::MatrixXd> Xs;
  std::vector<Eigen::VectorXd> ys;
  Eigen::Index rows = 0;
  auto member = [](const std::vector<std::size_t>& set, std::size_t b) {
    return std::find(set.begin(), set.end(), b) != set.end();
  };
  for (std::size_t t = 0; t < trajs.size(); ++t) {
    const auto blocks = sample_blocks(trajs[t]->times, schedule);
    Xs.emplace_back();
    ys.emplace_back();
    std::vector<std::size_t> index;
    raw_regressors(*trajs[t], target, cfg, blocks, Xs.back(), ys.back(), index);
    for (std::size_t r = 0; r < index.size(); ++r) {
      const auto b = blocks[index[r]];
      const auto row = static_cast<std::size_t>(rows) + r;
      if (member(split.train, b)) ds.train.push_back(row);
      else if (member(split.validation, b)) ds.validation.push_back(row);
      else if (member(split.test, b)) ds.test.push_back(row);
      ds.sample_index.push_back(index[r]);
      ds.source.push_back(t);
    }
    rows += Xs.back().rows();
  }
  Eigen::MatrixXd X(rows, Xs.front().cols());
  Eigen::VectorXd y(rows);
  Eigen::Index at = 0;
  for (std::size_t t = 0; t < Xs.size(); ++t) {
    X.middleRows(at, Xs[t].rows()) = Xs[t];
    y.segment(at, ys[t].size()) = ys[t];
    at += Xs[t].rows();
  }
  Eigen::MatrixXd Xtrain(static_cast<Eigen::Index>(ds.train.size()), X.cols());
  Eigen::MatrixXd ytrain(static_cast<Eigen::Index>(ds.train.size()), 1);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    Xtrain.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(ds.train[i]));
    ytrain(static_cast<Eigen::Index>(i), 0) = y[static_cast<Eigen::Index>(ds.train[i])];
  }
  ds.scalers.features = MinMaxScaler::fit(Xtrain);
  ds.scalers.target = MinMaxScaler::fit(ytrain);
  ds.X = ds.scalers.features.transform(X);
  ds.y = ds.scalers.target.transform(y).col(0);
  return ds;
}

inline NarxDataset build_regressors(const Trajectory& tr, const std::string& target,
                                    const NarxConfig& cfg, const InputSchedule& schedule,
                                    const BlockSplit& split) {
  return build_pooled_regressors({&tr}, target, cfg, schedule, split);
}

// ---------------------------------------------------------------------------
// Persistence: X.csv, y.csv, scalers.json

inline void write_narx_dataset(const NarxDataset& ds, const std::filesystem::path& dir) {
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < ds.X.cols(); ++j) names.push_back("x" + std::to_string(j));
  io::write_table(dir / "X.csv", matrix_table(ds.X, names));
  io::Table y;
  y.header = {"sample", "split", "y"};
  std::vector<int> split(ds.sample_index.size(), -1);
  for (auto r : ds.train) split[r] = 0;
  for (auto r : ds.validation) split[r] = 1;
  for (auto r : ds.test) split[r] = 2;
  for (std::size_t r = 0; r < ds.sample_index.size(); ++r)
    y.rows.push_back({static_cast<double>(ds.sample_index[r]), static_cast<double>(split[r]),
                      ds.y[static_cast<Eigen::Index>(r)]});
  io::write_table(dir / "y.csv", y);
  nlohmann::ordered_json s;
  s["target"] = ds.target;
  s["input_lags"] = ds.config.input_lags;
  s["output_lags"] = ds.config.output_lags;
  s["include_current_input"] = ds.config.include_current_input;
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  s["feature_min"] = vec(ds.scalers.features.min);
  s["feature_max"] = vec(ds.scalers.features.max);
  s["target_min"] = ds.scalers.target.min[0];
  s["target_max"] = ds.scalers.target.max[0];
  io::write_file(dir / "scalers.json", s.dump(2) + "\n");
}

}  // namespace uasml
