#pragma once

// Input excitation: Latin-hypercube step levels held for a fixed duration,
// input cross-correlation, and additive Gaussian measurement noise.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/io.hpp"
#include "uasml/reactor.hpp"
#include "uasml/rng.hpp"
#include "uasml/schedule.hpp"

namespace uasml {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double width() const noexcept { return hi - lo; }
};

struct LhsDesign {
  Eigen::MatrixXd samples;  // n_steps x n_inputs, physical units
  std::vector<Range> bounds;

  Eigen::Index steps() const noexcept { return samples.rows(); }
  Eigen::Index inputs() const noexcept { return samples.cols(); }
};

/// Lower edge of stratum k of n over r. Shared by the sampler and by checks.
inline double stratum_edge(const Range& r, std::size_t k, std::size_t n) {
  return r.lo + r.width() * static_cast<double>(k) / static_cast<double>(n);
}

/// Index of the stratum containing x, or n if x is outside the range.
inline std::size_t lhs_stratum(double x, const Range& r, std::size_t n) {
  if (!(x >= r.lo) || !(x <= r.hi)) return n;
  auto k = static_cast<std::size_t>((x - r.lo) / r.width() * static_cast<double>(n));
  k = std::min(k, n - 1);
  while (k > 0 && x < stratum_edge(r, k, n)) --k;
  while (k + 1 < n && x >= stratum_edge(r, k + 1, n)) ++k;
  return k;
}

inline LhsDesign lhs_sample(std::size_t n_steps, const std::vector<Range>& bounds, Engine& rng) {
  if (n_steps == 0) throw std::invalid_argument("lhs_sample: need at least one step");
  if (bounds.empty()) throw std::invalid_argument("lhs_sample: no inputs");
  for (const auto& b : bounds)
    if (!(b.hi > b.lo) || !std::isfinite(b.lo) || !std::isfinite(b.hi))
      throw std::invalid_argument("lhs_sample: degenerate bounds");

  LhsDesign d;
  d.bounds = bounds;
  d.samples.resize(static_cast<Eigen::Index>(n_steps), static_cast<Eigen::Index>(bounds.size()));
  std::vector<std::size_t> perm(n_steps);
  for (std::size_t j = 0; j < bounds.size(); ++j) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const Range& r = bounds[j];
    for (std::size_t i = 0; i < n_steps; ++i) {
      const std::size_t k = perm[i];
      const double lo = stratum_edge(r, k, n_steps);
      const double hi = k + 1 == n_steps ? r.hi : stratum_edge(r, k + 1, n_steps);
      double x = lo + (hi - lo) * uniform01(rng);
      // Rounding can push x onto the next edge; keep it inside its stratum.
      if (k + 1 < n_steps && x >= hi) x = std::nextafter(hi, lo);
      x = std::clamp(x, lo, r.hi);
      d.samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x;
    }
  }
  return d;
}

inline std::vector<Range> bounds_from_steady(const ReactorInputs& steady, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("bounds_from_steady: fraction must be in (0,1)");
  std::vector<Range> b;
  for (std::size_t i = 0; i < ReactorInputs::size; ++i)
    b.push_back({steady[i] * (1.0 - fraction), steady[i] * (1.0 + fraction)});
  return b;
}

/// Step schedule whose levels are the design rows in order.
inline InputSchedule to_schedule(const LhsDesign& design, double hold_duration,
                                 double start_time = 0.0) {
  if (design.inputs() != static_cast<Eigen::Index>(ReactorInputs::size))
    throw std::invalid_argument("to_schedule: design must have four input columns");
  InputSchedule s;
  s.hold_duration = hold_duration;
  s.start_time = start_time;
  for (Eigen::Index i = 0; i < design.steps(); ++i)
    s.step_levels.push_back({design.samples(i, 0), design.samples(i, 1), design.samples(i, 2),
                             design.samples(i, 3)});
  s.validate();
  return s;
}

/// Pearson correlation between the columns of x.
inline Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& x) {
  if (x.rows() < 3) throw std::invalid_argument("correlation_matrix: need at least 3 rows");
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::VectorXd ss = centered.colwise().squaredNorm();
  for (Eigen::Index j = 0; j < ss.size(); ++j)
    if (!(ss[j] > 0)) throw std::invalid_argument("correlation_matrix: zero-variance column");
  Eigen::MatrixXd c = centered.transpose() * centered;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      c(i, j) = i == j ? 1.0 : std::clamp(c(i, j) / std::sqrt(ss[i] * ss[j]), -1.0, 1.0);
  return c;
}

inline Eigen::MatrixXd correlation_matrix(const LhsDesign& design) {
  return correlation_matrix(design.samples);
}

inline double mean_abs_off_diagonal(const Eigen::MatrixXd& c) {
  double acc = 0.0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      if (i != j) {
        acc += std::abs(c(i, j));
        ++n;
      }
  return n ? acc / static_cast<double>(n) : 0.0;
}

/// 20 log10 of an amplitude ratio.
inline double amplitude_ratio_to_db(double ratio) { return 20.0 * std::log10(ratio); }

/// Adds white Gaussian noise with sigma = range_fraction * (max - min) of each
/// named noise-free series. Inputs and times are left alone.
inline Trajectory add_noise(Trajectory traj, const std::vector<std::string>& output_names,
                            double range_fraction, Engine& rng) {
  if (!(range_fraction > 0)) throw std::invalid_argument("add_noise: fraction must be positive");
  for (const auto& name : output_names) {
    if (name == "Qi" || name == "Qs" || name == "Qm" || name == "Qc")
      throw std::invalid_argument("add_noise: inputs are not noised");
    auto v = traj.channel(name);
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double range = *mx - *mn;
    if (!(range > 0) || !std::isfinite(range))
      throw std::invalid_argument("add_noise: series '" + name + "' has no range");
    std::normal_distribution<double> noise(0.0, range_fraction * range);
    for (double& x : v) x += noise(rng);
    traj.set_channel(name, v);
  }
  return traj;
}

inline io::Table schedule_table(const InputSchedule& s) {
  io::Table t;
  t.header = {"step_index", "start_time", "Qi", "Qs", "Qm", "Qc"};
  for (std::size_t k = 0; k < s.steps(); ++k) {
    const auto& u = s.step_levels[k];
    t.rows.push_back({static_cast<double>(k), s.step_start(k), u.Qi, u.Qs, u.Qm, u.Qc});
  }
  return t;
}

/// Rebuilds a schedule from its table; the hold is the spacing of start times.
inline InputSchedule schedule_from_table(const io::Table& t, double hold_duration) {
  if (t.header != std::vector<std::string>{"step_index", "start_time", "Qi", "Qs", "Qm", "Qc"})
    throw std::runtime_error("schedule csv: unexpected header");
  if (t.rows.empty()) throw std::runtime_error("schedule csv: no steps");
  InputSchedule s;
  s.hold_duration = hold_duration;
  s.start_time = t.rows.front()[1];
  for (const auto& r : t.rows) s.step_levels.push_back({r[2], r[3], r[4], r[5]});
  s.validate();
  return s;
}

inline io::Table matrix_table(const Eigen::MatrixXd& m, const std::vector<std::string>& names) {
  io::Table t;
  t.header = names;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace uasml
