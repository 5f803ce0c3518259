#pragma once

// Dense feed-forward regressor with a linear scalar output, trained by
// mini-batch Adam on mean squared error with early stopping on a validation
// split. Samples are stored as columns internally.

#include <Eigen/Dense>
#include <json.hpp>

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
#include "uasml/narx.hpp"
#include "uasml/rng.hpp"

namespace uasml {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

struct MlpSpec {
  std::size_t input_dim = 18;
  std::vector<std::size_t> hidden;
  std::vector<Activation> activations;
  double learning_rate = 1e-3;

  void validate() const {
    if (input_dim < 1) throw std::invalid_argument("mlp spec: input_dim must be >= 1");
    if (hidden.size() != activations.size())
      throw std::invalid_argument("mlp spec: one activation per hidden layer");
    for (auto w : hidden)
      if (w < 1) throw std::invalid_argument("mlp spec: widths must be >= 1");
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("mlp spec: bad learning rate");
  }

  /// Same activation on every hidden layer.
  static MlpSpec uniform(std::size_t input_dim, std::vector<std::size_t> widths, Activation a,
                         double lr = 1e-3) {
    MlpSpec s;
    s.input_dim = input_dim;
    s.activations.assign(widths.size(), a);
    s.hidden = std::move(widths);
    s.learning_rate = lr;
    return s;
  }

  std::string describe() const {
    std::string w;
    for (std::size_t i = 0; i < hidden.size(); ++i) w += (i ? "-" : "") + std::to_string(hidden[i]);
    return w.empty() ? "linear" : w;
  }

  bool operator==(const MlpSpec&) const = default;
};

inline std::size_t count_params(const MlpSpec& spec) {
  spec.validate();
  std::size_t total = 0, fan_in = spec.input_dim;
  for (auto w : spec.hidden) {
    total += (fan_in + 1) * w;
    fan_in = w;
  }
  return total + (fan_in + 1);
}

struct Layer {
  Eigen::MatrixXd W;  // out x in
  Eigen::VectorXd b;
};

struct EpochRecord {
  double train_mse = 0.0, train_mae = 0.0, val_mse = 0.0, val_mae = 0.0;
};

struct MlpModel {
  MlpSpec spec;
  std::vector<Layer> layers;
  NarxScalers scalers;  // snapshot of the data scaling, if any
  std::vector<EpochRecord> history;
  std::size_t epochs_trained = 0;
  std::size_t best_epoch = 0;  // 1-based; 0 when untrained
  bool stopped_early = false;
  std::uint64_t seed = 0;

  std::size_t depth() const noexcept { return layers.size(); }
};

inline Activation layer_activation(const MlpModel& m, std::size_t l) { return m.spec.activations[l]; }

/// Glorot-uniform weights, zero biases.
inline MlpModel init_mlp(const MlpSpec& spec, Engine& rng) {
  spec.validate();
  MlpModel m;
  m.spec = spec;
  std::size_t fan_in = spec.input_dim;
  auto make = [&](std::size_t fan_out) {
    Layer L;
    L.W.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index j = 0; j < L.W.cols(); ++j)
      for (Eigen::Index i = 0; i < L.W.rows(); ++i) L.W(i, j) = dist(rng);
    L.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fan_out));
    m.layers.push_back(std::move(L));
    fan_in = fan_out;
  };
  for (auto w : spec.hidden) make(w);
  make(1);
  return m;
}

inline MlpModel init_mlp(const MlpSpec& spec, std::uint64_t seed) {
  Engine rng = make_stream(seed, "mlp-init");
  auto m = init_mlp(spec, rng);
  m.seed = seed;
  return m;
}

namespace detail {

inline void activate(Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::relu) z = z.cwiseMax(0.0);
  else z = z.array().tanh().matrix();
}

/// Derivative of the activation expressed through its output.
inline void activation_grad(Eigen::MatrixXd& delta, const Eigen::MatrixXd& out, Activation a) {
  if (a == Activation::relu) delta = (out.array() > 0.0).select(delta, 0.0);
  else delta.array() *= 1.0 - out.array().square();
}

/// Activations of every layer for a features x samples input.
inline std::vector<Eigen::MatrixXd> forward_all(const MlpModel& m, const Eigen::MatrixXd& A0) {
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(m.layers.size() + 1);
  acts.push_back(A0);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    Eigen::MatrixXd z = m.layers[l].W * acts.back();
    z.colwise() += m.layers[l].b;
    if (l + 1 < m.layers.size()) activate(z, layer_activation(m, l));
    acts.push_back(std::move(z));
  }
  return acts;
}

}  // namespace detail

/// Predictions for a samples x features matrix.
inline Eigen::VectorXd forward(const MlpModel& m, const Eigen::MatrixXd& X) {
  if (X.cols() != static_cast<Eigen::Index>(m.spec.input_dim))
    throw std::invalid_argument("forward: expected " + std::to_string(m.spec.input_dim) + " columns, got " +
                                std::to_string(X.cols()));
  const auto acts = detail::forward_all(m, X.transpose());
  return acts.back().row(0).transpose();
}

using Gradients = std::vector<Layer>;

struct LossAndGrads {
  double mse = 0.0;
  Gradients grads;
};

namespace detail {

/// Loss and gradients for a features x samples batch.
inline LossAndGrads backprop(const MlpModel& m, const Eigen::MatrixXd& A0, const Eigen::RowVectorXd& y) {
  const auto n = static_cast<double>(A0.cols());
  const auto acts = forward_all(m, A0);
  Eigen::MatrixXd delta = acts.back() - y;  // 1 x n residuals
  LossAndGrads out;
  out.mse = delta.squaredNorm() / n;
  delta *= 2.0 / n;
  out.grads.resize(m.layers.size());
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    out.grads[l].W = delta * acts[l].transpose();
    out.grads[l].b = delta.rowwise().sum();
    if (l > 0) {
      delta = m.layers[l].W.transpose() * delta;
      activation_grad(delta, acts[l], layer_activation(m, l - 1));
    }
  }
  return out;
}

}  // namespace detail

inline LossAndGrads loss_and_grads(const MlpModel& m, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  if (X.rows() == 0) throw std::invalid_argument("loss_and_grads: empty batch");
  if (X.rows() != y.size()) throw std::invalid_argument("loss_and_grads: X and y lengths differ");
  if (X.cols() != static_cast<Eigen::Index>(m.spec.input_dim))
    throw std::invalid_argument("loss_and_grads: column count does not match input_dim");
  return detail::backprop(m, X.transpose(), y.transpose());
}

inline double metric_mse(const Eigen::VectorXd& pred, const Eigen::VectorXd& y) {
  if (pred.size() != y.size()) throw std::invalid_argument("metric: lengths differ");
  if (y.size() == 0) throw std::invalid_argument("metric: empty input");
  return (pred - y).squaredNorm() / static_cast<double>(y.size());
}

inline double metric_mae(const Eigen::VectorXd& pred, const Eigen::VectorXd& y) {
  if (pred.size() != y.size()) throw std::invalid_argument("metric: lengths differ");
  if (y.size() == 0) throw std::invalid_argument("metric: empty input");
  return (pred - y).cwiseAbs().sum() / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Gradients m, v;
  std::size_t t = 0;

  explicit AdamState(const MlpModel& model) {
    for (const auto& L : model.layers) {
      m.push_back({Eigen::MatrixXd::Zero(L.W.rows(), L.W.cols()), Eigen::VectorXd::Zero(L.b.size())});
      v.push_back(m.back());
    }
  }
};

/// One bias-corrected Adam update.
inline void adam_step(MlpModel& model, const Gradients& g, AdamState& s, const AdamConfig& cfg, double lr) {
  ++s.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  };
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    update(model.layers[l].W, g[l].W, s.m[l].W, s.v[l].W);
    update(model.layers[l].b, g[l].b, s.m[l].b, s.v[l].b);
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t max_epochs = 300;
  std::size_t patience = 100;
  std::size_t batch_size = 64;
  AdamConfig adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_epochs < 1 || batch_size < 1) throw std::invalid_argument("train config: sizes must be >= 1");
    if (patience >= max_epochs) throw std::invalid_argument("train config: patience must be below max_epochs");
  }
};

struct TrainData {
  Eigen::MatrixXd X_train, X_val;  // samples x features
  Eigen::VectorXd y_train, y_val;

  static TrainData from(const NarxDataset& ds) {
    return {ds.rows_of(ds.train), ds.rows_of(ds.validation), ds.targets_of(ds.train), ds.targets_of(ds.validation)};
  }
};

/// Mini-batch Adam, reshuffled each epoch. Stops once the validation MSE has
/// not improved for `patience` epochs and restores the best weights.
inline MlpModel train(MlpModel model, const TrainData& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.X_train.rows() == 0 || data.X_val.rows() == 0)
    throw std::invalid_argument("train: train and validation splits must be non-empty");
  const Eigen::MatrixXd Xt = data.X_train.transpose();
  const Eigen::MatrixXd Xv = data.X_val.transpose();
  const auto n = static_cast<std::size_t>(Xt.cols());
  Engine rng = make_stream(cfg.seed, "mlp-shuffle");
  AdamState state(model);
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  auto evaluate = [&](const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double& mse, double& mae) {
    const Eigen::VectorXd p = detail::forward_all(model, X).back().row(0).transpose();
    mse = metric_mse(p, y);
    mae = metric_mae(p, y);
  };

  std::vector<Layer> best = model.layers;
  double best_val = std::numeric_limits<double>::infinity();
  model.history.clear();
  model.stopped_early = false;
  model.best_epoch = 0;
  Eigen::MatrixXd Xb;
  Eigen::RowVectorXd yb;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const auto len = static_cast<Eigen::Index>(std::min(cfg.batch_size, n - start));
      Xb.resize(Xt.rows(), len);
      yb.resize(len);
      for (Eigen::Index j = 0; j < len; ++j) {
        const auto src = order[start + static_cast<std::size_t>(j)];
        Xb.col(j) = Xt.col(src);
        yb[j] = data.y_train[src];
      }
      const auto lg = detail::backprop(model, Xb, yb);
      adam_step(model, lg.grads, state, cfg.adam, model.spec.learning_rate);
    }
    EpochRecord rec;
    evaluate(Xt, data.y_train, rec.train_mse, rec.train_mae);
    evaluate(Xv, data.y_val, rec.val_mse, rec.val_mae);
    if (!std::isfinite(rec.train_mse) || !std::isfinite(rec.val_mse))
      throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
    model.history.push_back(rec);
    model.epochs_trained = epoch;
    if (rec.val_mse < best_val) {
      best_val = rec.val_mse;
      best = model.layers;
      model.best_epoch = epoch;
    } else if (epoch - model.best_epoch >= cfg.patience) {
      model.stopped_early = true;
      break;
    }
  }
  model.layers = std::move(best);
  return model;
}

inline MlpModel train(MlpModel model, const NarxDataset& ds, const TrainConfig& cfg) {
  model.scalers = ds.scalers;
  return train(std::move(model), TrainData::from(ds), cfg);
}

// ---------------------------------------------------------------------------
// Weights file, format version 1:
//   line 1: "uasml-mlp 1"
//   line 2: JSON header (spec, scalers, seed, training summary)
//   per layer: "layer <out> <in>", <out> rows of <in> weights, one bias row
// Numbers use shortest round-trip decimal text, so reloading is bit-exact.

inline void write_weights(const MlpModel& m, const std::filesystem::path& path) {
  nlohmann::ordered_json h;
  h["input_dim"] = m.spec.input_dim;
  h["hidden"] = m.spec.hidden;
  std::vector<std::string> acts;
  for (auto a : m.spec.activations) acts.push_back(to_string(a));
  h["activations"] = acts;
  h["learning_rate"] = io::format_double(m.spec.learning_rate);
  h["seed"] = m.seed;
  h["epochs_trained"] = m.epochs_trained;
  h["best_epoch"] = m.best_epoch;
  h["stopped_early"] = m.stopped_early;
  auto vec = [](const Eigen::VectorXd& v) {
    std::vector<std::string> s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s.push_back(io::format_double(v[i]));
    return s;
  };
  h["feature_min"] = vec(m.scalers.features.min);
  h["feature_max"] = vec(m.scalers.features.max);
  h["target_min"] = vec(m.scalers.target.min);
  h["target_max"] = vec(m.scalers.target.max);
  if (!m.history.empty() && m.best_epoch > 0) {
    const auto& r = m.history[m.best_epoch - 1];
    h["best_val_mse"] = io::format_double(r.val_mse);
    h["best_val_mae"] = io::format_double(r.val_mae);
  }
  std::ostringstream out;
  out << "uasml-mlp 1\n" << h.dump() << "\n";
  for (const auto& L : m.layers) {
    out << "layer " << L.W.rows() << ' ' << L.W.cols() << '\n';
    for (Eigen::Index i = 0; i < L.W.rows(); ++i) {
      for (Eigen::Index j = 0; j < L.W.cols(); ++j) out << (j ? " " : "") << io::format_double(L.W(i, j));
      out << '\n';
    }
    for (Eigen::Index i = 0; i < L.b.size(); ++i) out << (i ? " " : "") << io::format_double(L.b[i]);
    out << '\n';
  }
  io::write_file(path, out.str());
}

inline MlpModel read_weights(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "uasml-mlp 1") throw std::runtime_error("read_weights: unsupported format in " + path.string());
  std::getline(in, line);
  const auto h = nlohmann::json::parse(line);
  MlpModel m;
  m.spec.input_dim = h.at("input_dim").get<std::size_t>();
  m.spec.hidden = h.at("hidden").get<std::vector<std::size_t>>();
  for (const auto& a : h.at("activations")) m.spec.activations.push_back(activation_from_string(a.get<std::string>()));
  m.spec.learning_rate = io::parse_double(h.at("learning_rate").get<std::string>());
  m.spec.validate();
  m.seed = h.at("seed").get<std::uint64_t>();
  m.epochs_trained = h.at("epochs_trained").get<std::size_t>();
  m.best_epoch = h.at("best_epoch").get<std::size_t>();
  m.stopped_early = h.at("stopped_early").get<bool>();
  auto vec = [&](const char* key) {
    const auto s = h.at(key).get<std::vector<std::string>>();
    Eigen::VectorXd v(static_cast<Eigen::Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) v[static_cast<Eigen::Index>(i)] = io::parse_double(s[i]);
    return v;
  };
  m.scalers.features.min = vec("feature_min");
  m.scalers.features.max = vec("feature_max");
  m.scalers.target.min = vec("target_min");
  m.scalers.target.max = vec("target_max");
  auto read_row = [&](Eigen::Index expected) {
    std::getline(in, line);
    const auto parts = io::split(line, ' ');
    if (static_cast<Eigen::Index>(parts.size()) != expected)
      throw std::runtime_error("read_weights: bad row length in " + path.string());
    Eigen::VectorXd v(expected);
    for (Eigen::Index i = 0; i < expected; ++i) v[i] = io::parse_double(parts[static_cast<std::size_t>(i)]);
    return v;
  };
  std::size_t fan_in = m.spec.input_dim;
  for (std::size_t l = 0; l <= m.spec.hidden.size(); ++l) {
    const std::size_t fan_out = l < m.spec.hidden.size() ? m.spec.hidden[l] : 1;
    std::getline(in, line);
    if (line != "layer " + std::to_string(fan_out) + " " + std::to_string(fan_in))
      throw std::runtime_error("read_weights: layer shape mismatch in " + path.string());
    Layer L;
    L.W.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
    for (Eigen::Index i = 0; i < L.W.rows(); ++i) L.W.row(i) = read_row(L.W.cols()).transpose();
    L.b = read_row(static_cast<Eigen::Index>(fan_out));
    m.layers.push_back(std::move(L));
    fan_in = fan_out;
  }
  return m;
}

}  // namespace uasml
