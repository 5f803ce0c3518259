#pragma once

// Monte Carlo propagation of the calibrated parameter distribution: resample
// chain draws, simulate one trajectory per draw under a common input
// schedule, and split the schedule's step blocks into train, validation and
// test sets.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/excitation.hpp"
#include "uasml/inference.hpp"
#include "uasml/rng.hpp"

namespace uasml {

/// m rows sampled uniformly with replacement from the post-burn-in draws.
inline Eigen::MatrixXd draw_parameter_matrix(const Eigen::MatrixXd& post_burn_in, std::size_t m,
                                             Engine& rng) {
  if (post_burn_in.rows() == 0) throw std::invalid_argument("draw_parameter_matrix: empty chain");
  if (m == 0) throw std::invalid_argument("draw_parameter_matrix: m must be positive");
  std::uniform_int_distribution<Eigen::Index> pick(0, post_burn_in.rows() - 1);
  Eigen::MatrixXd theta(static_cast<Eigen::Index>(m), post_burn_in.cols());
  for (Eigen::Index i = 0; i < theta.rows(); ++i) theta.row(i) = post_burn_in.row(pick(rng));
  return theta;
}

struct BlockSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;

  std::size_t blocks() const noexcept { return train.size() + validation.size() + test.size(); }
};

/// Block counts by largest remainder; ties favour validation, then test.
inline std::array<std::size_t, 3> split_counts(std::size_t n_blocks,
                                               const std::array<double, 3>& fractions) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0)) throw std::invalid_argument("split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
  if (n_blocks < 3) throw std::invalid_argument("split: need at least 3 blocks");
  std::array<std::size_t, 3> count{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n_blocks);
    count[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(count[i]);
    used += count[i];
  }
  const std::array<int, 3> tie_order{1, 2, 0};
  while (used < n_blocks) {
    int best = tie_order[0];
    for (int i : tie_order)
      if (rem[i] > rem[best] + 1e-12) best = i;
    ++count[best];
    rem[best] = -1.0;
    ++used;
  }
  // Every split must be non-empty.
  for (int i = 0; i < 3; ++i)
    if (count[i] == 0) {
      auto donor = std::max_element(count.begin(), count.end());
      --*donor;
      ++count[i];
    }
  return count;
}

inline BlockSplit split_blocks(std::size_t n_blocks, const std::array<double, 3>& fractions,
                               Engine& rng) {
  const auto count = split_counts(n_blocks, fractions);
  std::vector<std::size_t> order(n_blocks);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  BlockSplit s;
  auto it = order.begin();
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(count[0]));
  it += static_cast<std::ptrdiff_t>(count[0]);
  s.validation.assign(it, it + static_cast<std::ptrdiff_t>(count[1]));
  it += static_cast<std::ptrdiff_t>(count[1]);
  s.test.assign(it, order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

/// Block (schedule step) index of every sample time.
inline std::vector<std::size_t> sample_blocks(const std::vector<double>& times,
                                              const InputSchedule& schedule) {
  std::vector<std::size_t> b;
  b.reserve(times.size());
  for (double t : times) b.push_back(schedule.step_at(t));
  return b;
}

struct EnsembleDataset {
  Eigen::MatrixXd theta;                  // m x 18, nominal-relative
  std::vector<std::size_t> rows;          // theta row of each trajectory
  std::vector<Trajectory> trajectories;
  std::vector<std::size_t> failed_rows;
  InputSchedule schedule;
  BlockSplit split;
  std::uint64_t seed = 0;
  double noise_fraction = 0.0;
  std::vector<std::string> noise_channels;

  std::size_t size() const noexcept { return trajectories.size(); }
};

/// One trajectory per theta row under a common schedule. Rows whose steady
/// state or integration fails are dropped and listed; more than 1% failures
/// aborts.
inline EnsembleDataset propagate_ensemble(const Eigen::MatrixXd& theta, const ReactorExperiment& ex,
                                          double max_failure_fraction = 0.01) {
  EnsembleDataset ds;
  ds.theta = theta;
  ds.schedule = ex.schedule;
  for (Eigen::Index i = 0; i < theta.rows(); ++i) {
    const auto tr = simulate_experiment(ex, ex.nominal.scaled(theta.row(i).transpose()));
    if (!tr) {
      ds.failed_rows.push_back(static_cast<std::size_t>(i));
      continue;
    }
    ds.rows.push_back(static_cast<std::size_t>(i));
    ds.trajectories.push_back(*tr);
  }
  if (static_cast<double>(ds.failed_rows.size()) >
      max_failure_fraction * static_cast<double>(theta.rows()))
    throw std::runtime_error("propagate_ensemble: " + std::to_string(ds.failed_rows.size()) +
                             " of " + std::to_string(theta.rows()) + " simulations failed");
  return ds;
}

/// Assign blocks to splits, then optionally add measurement noise to output
/// channels with one stream per trajectory.
inline void split_dataset(EnsembleDataset& ds, const std::array<double, 3>& fractions,
                          std::uint64_t seed, double noise_fraction = 0.0,
                          const std::vector<std::string>& noise_channels = {}) {
  Engine rng = make_stream(seed, "split");
  ds.split = split_blocks(ds.schedule.steps(), fractions, rng);
  ds.seed = seed;
  ds.noise_fraction = noise_fraction;
  ds.noise_channels = noise_channels;
  if (noise_fraction > 0 && !noise_channels.empty())
    for (std::size_t k = 0; k < ds.size(); ++k) {
      Engine nr = make_stream(seed, "ensemble-noise", ds.rows[k]);
      ds.trajectories[k] = add_noise(ds.trajectories[k], noise_channels, noise_fraction, nr);
    }
}

/// Linear-interpolation quantile of an ascending sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// ---------------------------------------------------------------------------
// Directory layout: manifest.json, theta.csv, traj_<row>.csv

inline void write_ensemble(const EnsembleDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::Table t;
  t.header = {"row"};
  for (auto n : ReactorParameters::names) t.header.push_back(n);
  for (Eigen::Index i = 0; i < ds.theta.rows(); ++i) {
    std::vector<double> r{static_cast<double>(i)};
    for (Eigen::Index j = 0; j < ds.theta.cols(); ++j) r.push_back(ds.theta(i, j));
    t.rows.push_back(std::move(r));
  }
  io::write_table(dir / "theta.csv", t);
  for (std::size_t k = 0; k < ds.size(); ++k)
    ds.trajectories[k].write_csv(dir / ("traj_" + std::to_string(ds.rows[k]) + ".csv"));
  nlohmann::ordered_json m;
  m["m"] = ds.theta.rows();
  m["seed"] = ds.seed;
  m["rows"] = ds.rows;
  m["failed_rows"] = ds.failed_rows;
  m["noise_fraction"] = ds.noise_fraction;
  m["noise_channels"] = ds.noise_channels;
  m["hold_duration"] = ds.schedule.hold_duration;
  m["split"] = {{"train", ds.split.train}, {"validation", ds.split.validation}, {"test", ds.split.test}};
  io::write_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline EnsembleDataset read_ensemble(const std::filesystem::path& dir, const InputSchedule& schedule) {
  const auto m = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  EnsembleDataset ds;
  ds.schedule = schedule;
  ds.seed = m.at("seed").get<std::uint64_t>();
  ds.rows = m.at("rows").get<std::vector<std::size_t>>();
  ds.failed_rows = m.at("failed_rows").get<std::vector<std::size_t>>();
  ds.noise_fraction = m.at("noise_fraction").get<double>();
  ds.noise_channels = m.at("noise_channels").get<std::vector<std::string>>();
  ds.split.train = m.at("split").at("train").get<std::vector<std::size_t>>();
  ds.split.validation = m.at("split").at("validation").get<std::vector<std::size_t>>();
  ds.split.test = m.at("split").at("test").get<std::vector<std::size_t>>();
  const auto t = io::read_table(dir / "theta.csv");
  ds.theta.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(ReactorParameters::size));
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    for (std::size_t j = 0; j < ReactorParameters::size; ++j)
      ds.theta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.rows[i][j + 1];
  for (auto r : ds.rows)
    ds.trajectories.push_back(Trajectory::read_csv(dir / ("traj_" + std::to_string(r) + ".csv")));
  return ds;
}

}  // namespace uasml
