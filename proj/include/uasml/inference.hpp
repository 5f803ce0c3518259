#pragma once

// Bayesian calibration of the reactor: the parameter vector is the 18
// reactor constants relative to their nominal values, the prior is uniform on
// a box around 1, and the likelihood is Gaussian with one unknown variance
// per observed channel.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/dram.hpp"
#include "uasml/reactor.hpp"

namespace uasml {

/// One simulated step-test experiment: the system starts at the steady state
/// of `steady_flows` and is driven by `schedule`, sampled on `grid`.
struct ReactorExperiment {
  ReactorParameters nominal;
  ModelVariant variant;
  ReactorInputs steady_flows;
  InputSchedule schedule;
  std::vector<double> grid;
  OdeOptions ode;
  ReactorState steady_guess = default_steady_guess();
};

/// Trajectory for one parameter set, or nothing if the model fails.
inline std::optional<Trajectory> simulate_experiment(const ReactorExperiment& ex,
                                                     const ReactorParameters& params) {
  try {
    params.validate();
    const ReactorState y0 = find_steady_state(params, ex.steady_flows, ex.variant, ex.steady_guess);
    return integrate(y0, ex.schedule, params, ex.variant, ex.grid, ex.ode);
  } catch (const std::exception&) {
    // Any model failure (invalid parameters, no steady state, integration
    // breakdown) is reported as a missing trajectory.
  }
  return std::nullopt;
}

struct InferenceProblem {
  ReactorExperiment experiment;
  std::vector<std::string> channels = {"T", "eta"};
  std::vector<std::vector<double>> data;  // per channel, on experiment.grid
  double bound_fraction = 0.05;

  std::size_t dim() const noexcept { return ReactorParameters::size; }
  Eigen::VectorXd lower() const { return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dim()), 1.0 - bound_fraction); }
  Eigen::VectorXd upper() const { return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dim()), 1.0 + bound_fraction); }

  std::vector<double> n_data() const {
    std::vector<double> n;
    for (const auto& d : data) n.push_back(static_cast<double>(d.size()));
    return n;
  }

  void validate() const {
    if (channels.empty() || channels.size() != data.size())
      throw std::invalid_argument("inference problem: one data series per channel required");
    for (const auto& d : data)
      if (d.size() != experiment.grid.size())
        throw std::invalid_argument("inference problem: data and grid lengths differ");
    if (!(bound_fraction > 0 && bound_fraction < 1))
      throw std::invalid_argument("inference problem: bound fraction must be in (0,1)");
  }
};

inline ReactorParameters to_physical(const InferenceProblem& p, const Eigen::VectorXd& eta) {
  return p.experiment.nominal.scaled(eta);
}

/// Model predictions for each channel, or nothing on model failure.
inline std::optional<std::vector<std::vector<double>>> forward(const InferenceProblem& p,
                                                               const Eigen::VectorXd& eta) {
  const auto tr = simulate_experiment(p.experiment, to_physical(p, eta));
  if (!tr) return std::nullopt;
  std::vector<std::vector<double>> out;
  for (const auto& c : p.channels) {
    out.push_back(tr->channel(c));
    for (double v : out.back())
      if (!std::isfinite(v)) return std::nullopt;
  }
  return out;
}

inline std::vector<double> channel_sse(const std::vector<std::vector<double>>& observed,
                                       const std::vector<std::vector<double>>& predicted) {
  if (observed.size() != predicted.size()) throw std::invalid_argument("channel_sse: channel count");
  std::vector<double> sse;
  for (std::size_t j = 0; j < observed.size(); ++j) {
    if (observed[j].size() != predicted[j].size()) throw std::invalid_argument("channel_sse: length");
    double s = 0.0;
    for (std::size_t i = 0; i < observed[j].size(); ++i) {
      const double r = observed[j][i] - predicted[j][i];
      s += r * r;
    }
    sse.push_back(s);
  }
  return sse;
}

/// -1/2 sum_j sse_j / phi_j.
inline double log_likelihood_from_sse(const std::vector<double>& sse, const std::vector<double>& phi) {
  if (sse.size() != phi.size()) throw std::invalid_argument("log likelihood: channel count");
  double ll = 0.0;
  for (std::size_t j = 0; j < sse.size(); ++j) {
    if (!(phi[j] > 0)) throw std::invalid_argument("log likelihood: variance must be positive");
    ll -= 0.5 * sse[j] / phi[j];
  }
  return ll;
}

/// Log-likelihood up to a constant; minus infinity when the model fails.
inline double log_likelihood(const Eigen::VectorXd& eta, const InferenceProblem& p,
                             const std::vector<double>& phi) {
  const auto y = forward(p, eta);
  if (!y) return -std::numeric_limits<double>::infinity();
  return log_likelihood_from_sse(channel_sse(p.data, *y), phi);
}

inline Target make_target(const InferenceProblem& p) {
  return [&p](const Eigen::VectorXd& eta) {
    const auto y = forward(p, eta);
    if (!y) return Evaluation{0.0, {}, false};
    return Evaluation{0.0, channel_sse(p.data, *y), true};
  };
}

/// Laplace approximation of the posterior covariance at eta: the inverse of
/// J' Phi^-1 J plus a Gaussian stand-in for the box prior (sd = half-width).
inline Eigen::MatrixXd laplace_covariance(const InferenceProblem& p, const Eigen::VectorXd& eta,
                                          const std::vector<double>& phi, double step = 1e-5) {
  const auto d = static_cast<Eigen::Index>(p.dim());
  const Eigen::Index n_per = static_cast<Eigen::Index>(p.experiment.grid.size());
  const auto channels = static_cast<Eigen::Index>(p.channels.size());
  Eigen::MatrixXd J(n_per * channels, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::VectorXd up = eta, dn = eta;
    up[k] += step;
    dn[k] -= step;
    const auto yu = forward(p, up), yd = forward(p, dn);
    if (!yu || !yd) throw std::runtime_error("laplace_covariance: model failed near the start point");
    for (Eigen::Index j = 0; j < channels; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const double w = 1.0 / std::sqrt(phi[ju]);
      for (Eigen::Index i = 0; i < n_per; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        J(j * n_per + i, k) = w * ((*yu)[ju][iu] - (*yd)[ju][iu]) / (2.0 * step);
      }
    }
  }
  Eigen::MatrixXd H = J.transpose() * J;
  H.diagonal().array() += 1.0 / (p.bound_fraction * p.bound_fraction);
  Eigen::MatrixXd C = H.ldlt().solve(Eigen::MatrixXd::Identity(d, d));
  return 0.5 * (C + C.transpose());
}

}  // namespace uasml
