#pragma once

// Monte Carlo training: one network per ensemble trajectory, a study of
// validation error against the number of pooled experiments, and
// nonparametric summaries of the member metrics.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/diagnostics.hpp"
#include "uasml/ensemble.hpp"
#include "uasml/io.hpp"
#include "uasml/mlp.hpp"
#include "uasml/narx.hpp"

namespace uasml {

struct SplitMetrics {
  double mse = 0.0;
  double mae = 0.0;
};

struct Member {
  std::size_t row = 0;  // theta row / trajectory tag
  MlpModel model;
  SplitMetrics train, validation, test;  // on scaled data, best weights
};

struct EnsembleModel {
  std::string target;
  MlpSpec spec;
  NarxConfig narx;
  std::vector<Member> members;
  std::vector<std::size_t> diverged_rows;

  std::size_t size() const noexcept { return members.size(); }
};

struct McTrainConfig {
  TrainConfig train;
  NarxConfig narx;
  std::size_t members = 0;  // first n trajectories; 0 trains all
  std::uint64_t seed = 0;
  double max_divergence = 0.05;
};

inline SplitMetrics split_metrics(const MlpModel& m, const NarxDataset& ds, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return {};
  const Eigen::VectorXd p = forward(m, ds.rows_of(idx));
  const Eigen::VectorXd y = ds.targets_of(idx);
  return {metric_mse(p, y), metric_mae(p, y)};
}

/// Trains the member for ensemble trajectory k. Seeds depend only on the
/// master seed and the trajectory's theta row.
inline Member train_member(const EnsembleDataset& data, std::size_t k, const MlpSpec& spec,
                           const McTrainConfig& cfg, const std::string& target) {
  const auto row = data.rows.at(k);
  const auto ds = build_regressors(data.trajectories[k], target, cfg.narx, data.schedule, data.split);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "mc-train", row);
  Member m;
  m.row = row;
  m.model = train(init_mlp(spec, derive_seed(cfg.seed, "mc-init", row)), ds, tc);
  m.model.seed = derive_seed(cfg.seed, "mc-init", row);
  m.train = split_metrics(m.model, ds, ds.train);
  m.validation = split_metrics(m.model, ds, ds.validation);
  m.test = split_metrics(m.model, ds, ds.test);
  return m;
}

inline EnsembleModel mc_training(const EnsembleDataset& data, const MlpSpec& spec, const McTrainConfig& cfg,
                                 const std::string& target) {
  if (data.size() == 0) throw std::invalid_argument("mc_training: empty ensemble");
  if (spec.input_dim != cfg.narx.features()) throw std::invalid_argument("mc_training: spec input width does not match the regressors");
  EnsembleModel e;
  e.target = target;
  e.spec = spec;
  e.narx = cfg.narx;
  const std::size_t n = cfg.members == 0 ? data.size() : std::min(cfg.members, data.size());
  for (std::size_t k = 0; k < n; ++k) {
    try {
      e.members.push_back(train_member(data, k, spec, cfg, target));
    } catch (const std::runtime_error&) {
      e.diverged_rows.push_back(data.rows[k]);
    }
  }
  if (static_cast<double>(e.diverged_rows.size()) > cfg.max_divergence * static_cast<double>(n)) {
    std::string list;
    for (auto r : e.diverged_rows) list += (list.empty() ? "" : ",") + std::to_string(r);
    throw std::runtime_error("mc_training: members diverged: " + list);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Summaries

struct Stat {
  double min = 0.0, max = 0.0, median = 0.0, std = 0.0;
};

inline Stat describe(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("describe: empty sample");
  return {*std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end()), median(v), sample_std(v)};
}

struct MetricSummary {
  Stat test_mse, test_mae, validation_mse, validation_mae, epochs;
  std::size_t members = 0;
};

inline std::vector<double> member_values(const EnsembleModel& e, double (*get)(const Member&)) {
  std::vector<double> v;
  for (const auto& m : e.members) v.push_back(get(m));
  return v;
}

inline MetricSummary summarize(const EnsembleModel& e) {
  if (e.members.empty()) throw std::invalid_argument("summarize: no members");
  MetricSummary s;
  s.members = e.size();
  s.test_mse = describe(member_values(e, [](const Member& m) { return m.test.mse; }));
  s.test_mae = describe(member_values(e, [](const Member& m) { return m.test.mae; }));
  s.validation_mse = describe(member_values(e, [](const Member& m) { return m.validation.mse; }));
  s.validation_mae = describe(member_values(e, [](const Member& m) { return m.validation.mae; }));
  s.epochs = describe(member_values(e, [](const Member& m) { return static_cast<double>(m.model.epochs_trained); }));
  return s;
}

/// Equal-width histogram over [min, max]: columns bin_lo, bin_hi, count.
inline io::Table histogram(const std::vector<double>& v, std::size_t bins) {
  if (v.empty() || bins == 0) throw std::invalid_argument("histogram: empty input");
  const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  std::vector<double> count(bins, 0.0);
  for (double x : v) count[std::min(bins - 1, static_cast<std::size_t>((x - lo) / width))] += 1.0;
  io::Table t;
  t.header = {"bin_lo", "bin_hi", "count"};
  for (std::size_t b = 0; b < bins; ++b)
    t.rows.push_back({lo + width * static_cast<double>(b), lo + width * static_cast<double>(b + 1), count[b]});
  return t;
}

inline nlohmann::ordered_json to_json(const Stat& s) {
  return {{"min", s.min}, {"max", s.max}, {"median", s.median}, {"std", s.std}};
}

inline nlohmann::ordered_json to_json(const MetricSummary& s) {
  nlohmann::ordered_json j;
  j["members"] = s.members;
  j["test"] = {{"mse", to_json(s.test_mse)}, {"mae", to_json(s.test_mae)}};
  j["validation"] = {{"mse", to_json(s.validation_mse)}, {"mae", to_json(s.validation_mae)}};
  j["epochs"] = to_json(s.epochs);
  return j;
}

// ---------------------------------------------------------------------------
// Ensemble directory: member_<row>.weights, metrics.csv, summary.json,
// histogram_<metric>.csv

inline std::string metrics_csv(const EnsembleModel& e) {
  std::ostringstream out;
  out << "member,split,mse,mae,epochs\n";
  for (const auto& m : e.members)
    for (const auto& [name, met] : {std::pair<const char*, const SplitMetrics*>{"train", &m.train},
                                    {"validation", &m.validation}, {"test", &m.test}})
      out << m.row << ',' << name << ',' << io::format_double(met->mse) << ',' << io::format_double(met->mae) << ','
          << m.model.epochs_trained << '\n';
  return out.str();
}

inline void write_ensemble_model(const EnsembleModel& e, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& m : e.members) write_weights(m.model, dir / ("member_" + std::to_string(m.row) + ".weights"));
  io::write_file(dir / "metrics.csv", metrics_csv(e));
  const auto s = summarize(e);
  nlohmann::ordered_json j;
  j["target"] = e.target;
  j["spec"] = e.spec.describe();
  j["activation"] = e.spec.activations.empty() ? "none" : to_string(e.spec.activations[0]);
  j["learning_rate"] = e.spec.learning_rate;
  j["parameters"] = count_params(e.spec);
  j["input_lags"] = e.narx.input_lags;
  j["output_lags"] = e.narx.output_lags;
  j["include_current_input"] = e.narx.include_current_input;
  std::vector<std::size_t> rows;
  for (const auto& m : e.members) rows.push_back(m.row);
  j["rows"] = rows;
  j["diverged_rows"] = e.diverged_rows;
  j["summary"] = to_json(s);
  io::write_file(dir / "summary.json", j.dump(2) + "\n");
  const std::size_t bins = 20;
  io::write_table(dir / "histogram_test_mse.csv", histogram(member_values(e, [](const Member& m) { return m.test.mse; }), bins));
  io::write_table(dir / "histogram_test_mae.csv", histogram(member_values(e, [](const Member& m) { return m.test.mae; }), bins));
  io::write_table(dir / "histogram_validation_mse.csv",
                  histogram(member_values(e, [](const Member& m) { return m.validation.mse; }), bins));
  io::write_table(dir / "histogram_epochs.csv",
                  histogram(member_values(e, [](const Member& m) { return static_cast<double>(m.model.epochs_trained); }), bins));
}

/// Reloads weights and per-member metrics written by write_ensemble_model.
inline EnsembleModel read_ensemble_model(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(io::read_file(dir / "summary.json"));
  EnsembleModel e;
  e.target = j.at("target").get<std::string>();
  e.narx.input_lags = j.at("input_lags").get<std::size_t>();
  e.narx.output_lags = j.at("output_lags").get<std::size_t>();
  e.narx.include_current_input = j.at("include_current_input").get<bool>();
  e.diverged_rows = j.at("diverged_rows").get<std::vector<std::size_t>>();
  for (auto row : j.at("rows").get<std::vector<std::size_t>>()) {
    Member m;
    m.row = row;
    m.model = read_weights(dir / ("member_" + std::to_string(row) + ".weights"));
    e.members.push_back(std::move(m));
  }
  if (!e.members.empty()) e.spec = e.members.front().model.spec;
  std::istringstream in(io::read_file(dir / "metrics.csv"));
  std::string line;
  std::getline(in, line);
  std::size_t i = 0;
  while (std::getline(in, line)) {
    const auto f = io::split(line);
    if (f.size() != 5) throw std::runtime_error("metrics.csv: bad row");
    while (i < e.members.size() && std::to_string(e.members[i].row) != f[0]) ++i;
    if (i == e.members.size()) throw std::runtime_error("metrics.csv: unknown member " + f[0]);
    SplitMetrics s{io::parse_double(f[2]), io::parse_double(f[3])};
    if (f[1] == "train") e.members[i].train = s;
    else if (f[1] == "validation") e.members[i].validation = s;
    else e.members[i].test = s;
  }
  return e;
}

// ---------------------------------------------------------------------------
// Training-set size study: an experiment is one ensemble trajectory; a
// subset of experiments is pooled into one dataset with shared scalers.

struct SizePoint {
  std::size_t size = 0;
  double mean_mse = 0.0, std_mse = 0.0, mean_mae = 0.0, std_mae = 0.0;
  std::vector<double> mse, mae;  // per repeat, validation split
};

struct DataSizeStudy {
  std::vector<SizePoint> points;
  double spearman_rho = 0.0;  // mean MSE against size
};

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const Eigen::Map<const Eigen::VectorXd> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Eigen::VectorXd> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Eigen::VectorXd xc = x.array() - x.mean(), yc = y.array() - y.mean();
  const double den = std::sqrt(xc.squaredNorm() * yc.squaredNorm());
  return den > 0 ? xc.dot(yc) / den : 0.0;
}

inline DataSizeStudy data_size_study(const EnsembleDataset& data, const MlpSpec& spec, const McTrainConfig& cfg,
                                     const std::string& target, const std::vector<std::size_t>& sizes,
                                     std::size_t repeats) {
  if (sizes.empty() || repeats == 0) throw std::invalid_argument("data_size_study: need sizes and repeats");
  for (auto s : sizes)
    if (s == 0 || s > data.size())
      throw std::invalid_argument("data_size_study: size " + std::to_string(s) + " exceeds the " +
                                  std::to_string(data.size()) + " available experiments");
  DataSizeStudy out;
  std::vector<double> xs, ys;
  for (auto size : sizes) {
    SizePoint p;
    p.size = size;
    for (std::size_t r = 0; r < repeats; ++r) {
      Engine rng = make_stream(cfg.seed, "datasize-subset", size * 1000003u + r);
      std::vector<std::size_t> order(data.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<const Trajectory*> pick;
      for (std::size_t i = 0; i < size; ++i) pick.push_back(&data.trajectories[order[i]]);
      const auto ds = build_pooled_regressors(pick, target, cfg.narx, data.schedule, data.split);
      TrainConfig tc = cfg.train;
      tc.seed = derive_seed(cfg.seed, "datasize-train", size * 1000003u + r);
      const auto m = train(init_mlp(spec, derive_seed(cfg.seed, "datasize-init", size * 1000003u + r)), ds, tc);
      const auto v = split_metrics(m, ds, ds.validation);
      p.mse.push_back(v.mse);
      p.mae.push_back(v.mae);
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
    p.mean_mse = mean(p.mse);
    p.mean_mae = mean(p.mae);
    p.std_mse = sample_std(p.mse);
    p.std_mae = sample_std(p.mae);
    xs.push_back(static_cast<double>(size));
    ys.push_back(p.mean_mse);
    out.points.push_back(std::move(p));
  }
  out.spearman_rho = sizes.size() >= 2 ? spearman(xs, ys) : 0.0;
  return out;
}

inline io::Table data_size_table(const DataSizeStudy& s) {
  io::Table t;
  t.header = {"experiments", "mean_mse", "std_mse", "mean_mae", "std_mae"};
  for (const auto& p : s.points)
    t.rows.push_back({static_cast<double>(p.size), p.mean_mse, p.std_mse, p.mean_mae, p.std_mae});
  return t;
}

}  // namespace uasml
