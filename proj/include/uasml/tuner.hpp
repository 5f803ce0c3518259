#pragma once

// Hyperband architecture search: brackets of successive halving over randomly
// sampled network specs, ranked by validation MSE.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/io.hpp"
#include "uasml/mlp.hpp"
#include "uasml/rng.hpp"

namespace uasml {

struct SearchSpace {
  std::size_t min_layers = 2;
  std::size_t max_layers = 6;
  std::vector<std::size_t> neurons = {30, 50, 70, 90, 100, 120, 130, 160};
  std::vector<Activation> activations = {Activation::relu, Activation::tanh};
  std::vector<double> learning_rates = {1e-4, 1e-3, 1e-1};

  void validate() const {
    if (min_layers > max_layers) throw std::invalid_argument("search space: min_layers > max_layers");
    if (neurons.empty() || activations.empty() || learning_rates.empty())
      throw std::invalid_argument("search space: empty choice list");
  }

  MlpSpec sample(std::size_t input_dim, Engine& rng) const {
    auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
    MlpSpec s;
    s.input_dim = input_dim;
    const std::size_t layers = min_layers + pick(max_layers - min_layers + 1);
    for (std::size_t i = 0; i < layers; ++i) s.hidden.push_back(neurons[pick(neurons.size())]);
    s.activations.assign(layers, activations[pick(activations.size())]);
    s.learning_rate = learning_rates[pick(learning_rates.size())];
    return s;
  }
};

struct HyperbandConfig {
  std::size_t max_budget = 90;  // epochs at the last rung
  std::size_t eta = 3;
  std::size_t brackets = 3;  // s = brackets-1 .. 0
  std::uint64_t seed = 0;
  TrainConfig train;  // max_epochs and patience are capped by each rung's budget

  void validate() const {
    if (eta < 2) throw std::invalid_argument("hyperband: eta must be >= 2");
    if (brackets < 1) throw std::invalid_argument("hyperband: need at least one bracket");
    if (max_budget < ipow(eta, brackets - 1))
      throw std::invalid_argument("hyperband: max_budget too small for the bracket count");
  }

  static std::size_t ipow(std::size_t b, std::size_t e) {
    std::size_t r = 1;
    while (e--) r *= b;
    return r;
  }
};

struct Rung {
  std::size_t configs;
  std::size_t budget;
};

/// Rung schedule of bracket s: n = ceil(B/(s+1) * eta^s) configs at R/eta^s
/// epochs, keeping floor(n/eta^i) at rung i.
inline std::vector<Rung> bracket_rungs(const HyperbandConfig& cfg, std::size_t s) {
  const auto eta_s = HyperbandConfig::ipow(cfg.eta, s);
  const auto n = static_cast<std::size_t>(
      std::ceil(static_cast<double>(cfg.brackets) / static_cast<double>(s + 1) * static_cast<double>(eta_s)));
  const auto r = cfg.max_budget / eta_s;
  std::vector<Rung> rungs;
  for (std::size_t i = 0; i <= s; ++i) {
    const auto eta_i = HyperbandConfig::ipow(cfg.eta, i);
    rungs.push_back({std::max<std::size_t>(1, n / eta_i), i == s ? cfg.max_budget : r * eta_i});
  }
  return rungs;
}

/// Upper bound on epochs spent by a full search.
inline std::size_t hyperband_budget(const HyperbandConfig& cfg) {
  std::size_t total = 0;
  for (std::size_t s = 0; s < cfg.brackets; ++s)
    for (const auto& r : bracket_rungs(cfg, s)) total += r.configs * r.budget;
  return total;
}

struct TrialRecord {
  std::size_t trial = 0;  // index of the sampled spec
  std::size_t bracket = 0;
  std::size_t rung = 0;
  std::size_t budget = 0;
  MlpSpec spec;
  double val_mse = 0.0;
  double val_mae = 0.0;
  std::size_t epochs = 0;  // actually trained, early stopping included
  bool diverged = false;
};

struct HyperbandResult {
  MlpSpec best;
  MlpModel best_model;
  double best_val_mse = 0.0;
  double test_mse = 0.0;  // winner only
  double test_mae = 0.0;
  std::vector<TrialRecord> trials;
  std::size_t epochs_spent = 0;
};

struct SearchData {
  TrainData fit;  // train and validation splits
  Eigen::MatrixXd X_test;
  Eigen::VectorXd y_test;

  static SearchData from(const NarxDataset& ds) {
    return {TrainData::from(ds), ds.rows_of(ds.test), ds.targets_of(ds.test)};
  }
};

inline HyperbandResult hyperband_search(const SearchSpace& space, const SearchData& data,
                                        const HyperbandConfig& cfg) {
  space.validate();
  cfg.validate();
  if (data.fit.X_train.rows() == 0 || data.fit.X_val.rows() == 0)
    throw std::invalid_argument("hyperband: train and validation splits must be non-empty");
  const auto input_dim = static_cast<std::size_t>(data.fit.X_train.cols());
  Engine rng = make_stream(cfg.seed, "hyperband-specs");

  HyperbandResult result;
  result.best_val_mse = std::numeric_limits<double>::infinity();
  bool have_best = false;
  std::size_t next_trial = 0;
  for (std::size_t s = cfg.brackets; s-- > 0;) {
    const auto rungs = bracket_rungs(cfg, s);
    std::vector<std::pair<std::size_t, MlpSpec>> alive;
    for (std::size_t i = 0; i < rungs.front().configs; ++i) alive.emplace_back(next_trial++, space.sample(input_dim, rng));
    for (std::size_t r = 0; r < rungs.size(); ++r) {
      std::vector<std::pair<double, std::size_t>> ranked;  // (val_mse, position in alive)
      for (std::size_t a = 0; a < alive.size(); ++a) {
        const auto& [id, spec] = alive[a];
        TrainConfig tc = cfg.train;
        tc.max_epochs = rungs[r].budget;
        tc.patience = std::min(cfg.train.patience, rungs[r].budget - 1);
        if (tc.patience == 0) tc.patience = 1, tc.max_epochs = std::max<std::size_t>(tc.max_epochs, 2);
        tc.seed = derive_seed(cfg.seed, "hyperband-train", id);
        TrialRecord rec{id, s, r, rungs[r].budget, spec, 0.0, 0.0, 0, false};
        try {
          auto model = train(init_mlp(spec, derive_seed(cfg.seed, "hyperband-init", id)), data.fit, tc);
          rec.epochs = model.epochs_trained;
          const auto& best = model.history[model.best_epoch - 1];
          rec.val_mse = best.val_mse;
          rec.val_mae = best.val_mae;
          ranked.emplace_back(rec.val_mse, a);
          if (rungs[r].budget == cfg.max_budget && rec.val_mse < result.best_val_mse) {
            result.best_val_mse = rec.val_mse;
            result.best = spec;
            result.best_model = std::move(model);
            have_best = true;
          }
        } catch (const std::runtime_error&) {
          rec.diverged = true;
          rec.val_mse = rec.val_mae = std::numeric_limits<double>::quiet_NaN();
          rec.epochs = tc.max_epochs;
        }
        result.epochs_spent += rec.epochs;
        result.trials.push_back(rec);
      }
      if (r + 1 == rungs.size()) break;
      std::stable_sort(ranked.begin(), ranked.end());
      const std::size_t keep = std::min(rungs[r + 1].configs, ranked.size());
      decltype(alive) next;
      for (std::size_t k = 0; k < keep; ++k) next.push_back(alive[ranked[k].second]);
      alive = std::move(next);
      if (alive.empty()) break;
    }
  }
  if (!have_best) throw std::runtime_error("hyperband: every full-budget trial diverged");
  if (data.X_test.rows() > 0) {
    const Eigen::VectorXd p = forward(result.best_model, data.X_test);
    result.test_mse = metric_mse(p, data.y_test);
    result.test_mae = metric_mae(p, data.y_test);
  }
  return result;
}

inline std::string trial_log_csv(const std::vector<TrialRecord>& trials) {
  std::ostringstream out;
  out << "trial,rung,budget,layers,widths,activation,lr,val_mse,val_mae\n";
  for (const auto& t : trials)
    out << t.trial << ',' << t.rung << ',' << t.budget << ',' << t.spec.hidden.size() << ','
        << t.spec.describe() << ',' << to_string(t.spec.activations.empty() ? Activation::tanh : t.spec.activations[0])
        << ',' << io::format_double(t.spec.learning_rate) << ',' << io::format_double(t.val_mse) << ','
        << io::format_double(t.val_mae) << '\n';
  return out.str();
}

}  // namespace uasml
