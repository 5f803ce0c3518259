#pragma once

// Delayed Rejection Adaptive Metropolis over a box-bounded parameter vector,
// with Gibbs updates of per-channel Gaussian observation variances.
//
// The target returns a parameter-only log density plus one sum of squared
// residuals per output channel; the log posterior is
//   base - 1/2 sum_j sse_j / phi_j
// so the variances can be redrawn without re-running the model.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/io.hpp"
#include "uasml/rng.hpp"

namespace uasml {

struct Evaluation {
  double log_base = 0.0;
  std::vector<double> sse;  // one per channel; empty when no variance model
  bool ok = true;
};

using Target = std::function<Evaluation(const Eigen::VectorXd&)>;

// ---------------------------------------------------------------------------
// Observation variance

struct VariancePrior {
  double n_prior = 0.0;  // pseudo-observations; 0 gives the non-informative prior
  double v0_sq = 1.0;    // prior guess of the variance
};

enum class BetaConvention {
  standard,    // InvGamma(alpha, scale = SSE/2)
  as_printed,  // precision ~ Gamma(alpha, scale beta = 2/SSE)
};

struct VarianceState {
  std::vector<double> phi;
  std::vector<double> n_data;
  std::vector<double> sse;
  std::vector<double> alpha;
  std::vector<double> beta;  // inverse-gamma scale, or 2/SSE in the as-printed convention
};

inline double variance_alpha(double n_data, const VariancePrior& prior = {}) {
  return 0.5 * (prior.n_prior + n_data);
}

inline double variance_scale(double sse, const VariancePrior& prior = {}) {
  return 0.5 * (prior.n_prior * prior.v0_sq + sse);
}

inline double as_printed_beta(double sse) { return 2.0 / sse; }

/// Draw from InvGamma(alpha, scale).
inline double sample_inverse_gamma(double alpha, double scale, Engine& rng) {
  if (!(alpha > 0) || !(scale > 0))
    throw std::invalid_argument("inverse gamma: alpha and scale must be positive");
  return 1.0 / std::gamma_distribution<double>(alpha, 1.0 / scale)(rng);
}

/// Conjugate draw of the per-channel observation variances.
inline VarianceState sample_variance_posterior(const std::vector<double>& sse,
                                               const std::vector<double>& n_data, Engine& rng,
                                               const VariancePrior& prior = {},
                                               BetaConvention convention = BetaConvention::standard) {
  if (sse.size() != n_data.size()) throw std::invalid_argument("variance posterior: size mismatch");
  VarianceState v;
  v.sse = sse;
  v.n_data = n_data;
  for (std::size_t j = 0; j < sse.size(); ++j) {
    if (!(sse[j] > 0) && !(prior.n_prior > 0))
      throw std::invalid_argument("variance posterior: zero SSE gives a degenerate posterior");
    if (!(n_data[j] >= 1)) throw std::invalid_argument("variance posterior: need data");
    const double a = variance_alpha(n_data[j], prior);
    v.alpha.push_back(a);
    if (convention == BetaConvention::standard) {
      const double s = variance_scale(sse[j], prior);
      v.beta.push_back(s);
      v.phi.push_back(sample_inverse_gamma(a, s, rng));
    } else {
      const double b = as_printed_beta(sse[j]);
      v.beta.push_back(b);
      v.phi.push_back(1.0 / std::gamma_distribution<double>(a, b)(rng));
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Sampler

struct DramConfig {
  std::size_t n_samples = 5000;
  std::size_t burn_in = 1000;
  double initial_cov_scale = 0.01;  // proposal sigma, relative to |x0|
  double dr_shrink = 0.2;
  std::size_t adapt_interval = 100;
  double epsilon = 1e-10;
  bool adapt = true;
  bool delayed_rejection = true;
  std::uint64_t seed = 1;
  Eigen::MatrixXd initial_cov;  // used instead of the diagonal when non-empty
};

struct VarianceModel {
  std::vector<double> n_data;  // empty: no variance sampling, sse ignored
  std::vector<double> phi0;
  VariancePrior prior;
  BetaConvention convention = BetaConvention::standard;
};

enum class Stage : int { rejected = 0, first = 1, delayed = 2 };

struct Chain {
  Eigen::MatrixXd draws;  // n_samples x d
  Eigen::VectorXd log_posterior;
  Eigen::MatrixXd phi;  // n_samples x channels
  std::vector<Stage> stage;
  std::size_t burn_in = 0;
  std::size_t failed_evaluations = 0;
  std::vector<std::string> param_names;
  std::vector<std::string> channel_names;

  std::size_t size() const noexcept { return static_cast<std::size_t>(draws.rows()); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(draws.cols()); }

  Eigen::MatrixXd post_burn_in() const {
    const auto b = static_cast<Eigen::Index>(burn_in);
    return draws.bottomRows(draws.rows() - b);
  }

  double acceptance_rate(bool after_burn_in = true) const {
    const std::size_t start = after_burn_in ? burn_in : 0;
    if (start >= stage.size()) return 0.0;
    std::size_t acc = 0;
    for (std::size_t i = start; i < stage.size(); ++i) acc += stage[i] != Stage::rejected;
    return static_cast<double>(acc) / static_cast<double>(stage.size() - start);
  }

  io::Table to_table() const {
    io::Table t;
    t.header = {"draw_index", "accepted", "stage", "log_posterior"};
    for (std::size_t j = 0; j < dim(); ++j)
      t.header.push_back(j < param_names.size() ? param_names[j] : "p" + std::to_string(j));
    for (Eigen::Index j = 0; j < phi.cols(); ++j) {
      const auto ju = static_cast<std::size_t>(j);
      t.header.push_back("phi_" + (ju < channel_names.size() ? channel_names[ju] : std::to_string(j)));
    }
    for (std::size_t i = 0; i < size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      std::vector<double> row{static_cast<double>(i), stage[i] != Stage::rejected ? 1.0 : 0.0,
                              static_cast<double>(static_cast<int>(stage[i])), log_posterior[ii]};
      for (Eigen::Index j = 0; j < draws.cols(); ++j) row.push_back(draws(ii, j));
      for (Eigen::Index j = 0; j < phi.cols(); ++j) row.push_back(phi(ii, j));
      t.rows.push_back(std::move(row));
    }
    return t;
  }

  static Chain from_table(const io::Table& t, std::size_t burn_in) {
    if (t.header.size() < 5 || t.header[0] != "draw_index" || t.header[3] != "log_posterior")
      throw std::runtime_error("chain csv: unexpected header");
    Chain c;
    c.burn_in = burn_in;
    std::size_t np = 0, nc = 0;
    for (std::size_t j = 4; j < t.header.size(); ++j) {
      if (t.header[j].rfind("phi_", 0) == 0) {
        c.channel_names.push_back(t.header[j].substr(4));
        ++nc;
      } else {
        if (nc) throw std::runtime_error("chain csv: parameter column after variance column");
        c.param_names.push_back(t.header[j]);
        ++np;
      }
    }
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    c.draws.resize(n, static_cast<Eigen::Index>(np));
    c.phi.resize(n, static_cast<Eigen::Index>(nc));
    c.log_posterior.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& r = t.rows[static_cast<std::size_t>(i)];
      c.stage.push_back(static_cast<Stage>(static_cast<int>(r[2])));
      c.log_posterior[i] = r[3];
      for (std::size_t j = 0; j < np; ++j) c.draws(i, static_cast<Eigen::Index>(j)) = r[4 + j];
      for (std::size_t j = 0; j < nc; ++j) c.phi(i, static_cast<Eigen::Index>(j)) = r[4 + np + j];
    }
    if (burn_in >= c.size() && c.size() > 0)
      throw std::runtime_error("chain csv: burn-in exceeds chain length");
    return c;
  }
};

namespace detail {

/// Running mean and covariance (Welford).
class RunningCovariance {
 public:
  explicit RunningCovariance(Eigen::Index d) : mean_(Eigen::VectorXd::Zero(d)), m2_(Eigen::MatrixXd::Zero(d, d)) {}

  void add(const Eigen::VectorXd& x) {
    ++n_;
    const Eigen::VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_).transpose();
  }

  std::size_t count() const noexcept { return n_; }
  Eigen::MatrixXd covariance() const {
    Eigen::MatrixXd c = m2_ / static_cast<double>(n_ - 1);
    return 0.5 * (c + c.transpose());
  }

 private:
  std::size_t n_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

inline bool in_box(const Eigen::VectorXd& x, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
}

/// Lower Cholesky factor, adding jitter if the matrix is numerically indefinite.
inline Eigen::MatrixXd robust_cholesky(Eigen::MatrixXd c, double epsilon) {
  for (int attempt = 0; attempt < 20; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(c);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    const double bump = std::max(epsilon, 1e-12 * c.diagonal().cwiseAbs().maxCoeff()) *
                        std::pow(10.0, attempt);
    c.diagonal().array() += bump;
  }
  throw std::runtime_error("proposal covariance is not positive definite");
}

}  // namespace detail

struct DramProblem {
  Target target;
  Eigen::VectorXd x0;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  VarianceModel variance;  // optional
};

inline Chain run_dram(const DramProblem& problem, const DramConfig& cfg) {
  const Eigen::Index d = problem.x0.size();
  if (d == 0) throw std::invalid_argument("run_dram: empty parameter vector");
  if (problem.lower.size() != d || problem.upper.size() != d)
    throw std::invalid_argument("run_dram: bounds size mismatch");
  if (!(cfg.n_samples > cfg.burn_in)) throw std::invalid_argument("run_dram: n_samples <= burn_in");
  if (!detail::in_box(problem.x0, problem.lower, problem.upper))
    throw std::invalid_argument("run_dram: start point outside bounds");
  if (!(cfg.dr_shrink > 0 && cfg.dr_shrink < 1))
    throw std::invalid_argument("run_dram: dr_shrink must be in (0,1)");

  const bool sample_phi = !problem.variance.n_data.empty();
  const auto channels = static_cast<Eigen::Index>(problem.variance.n_data.size());
  Eigen::VectorXd phi(channels);
  for (Eigen::Index j = 0; j < channels; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    phi[j] = ju < problem.variance.phi0.size() ? problem.variance.phi0[ju] : 1.0;
  }

  auto log_post = [&](const Evaluation& e) {
    if (!e.ok || !std::isfinite(e.log_base)) return -std::numeric_limits<double>::infinity();
    double lp = e.log_base;
    if (sample_phi) {
      if (e.sse.size() != static_cast<std::size_t>(channels))
        throw std::runtime_error("run_dram: target returned wrong channel count");
      for (Eigen::Index j = 0; j < channels; ++j) lp -= 0.5 * e.sse[static_cast<std::size_t>(j)] / phi[j];
    }
    return lp;
  };

  Engine rng = make_stream(cfg.seed, "dram");
  Engine phi_rng = make_stream(cfg.seed, "dram-variance");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&]() {
    Eigen::VectorXd z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = normal(rng);
    return z;
  };

  Eigen::MatrixXd cov;
  if (cfg.initial_cov.size() > 0) {
    if (cfg.initial_cov.rows() != d || cfg.initial_cov.cols() != d)
      throw std::invalid_argument("run_dram: initial covariance has wrong shape");
    cov = cfg.initial_cov;
  } else {
    const Eigen::VectorXd sd = (cfg.initial_cov_scale * problem.x0.array().abs()).max(cfg.initial_cov_scale * 1e-3);
    cov = sd.array().square().matrix().asDiagonal();
  }
  Eigen::MatrixXd L1 = detail::robust_cholesky(cov, cfg.epsilon);
  Eigen::MatrixXd L2 = cfg.dr_shrink * L1;
  const double sd_scale = 2.4 * 2.4 / static_cast<double>(d);

  Chain chain;
  const auto n = static_cast<Eigen::Index>(cfg.n_samples);
  chain.draws.resize(n, d);
  chain.log_posterior.resize(n);
  chain.phi.resize(n, channels);
  chain.stage.reserve(cfg.n_samples);
  chain.burn_in = cfg.burn_in;

  Eigen::VectorXd x = problem.x0;
  Evaluation ex = problem.target(x);
  double lpx = log_post(ex);
  if (!std::isfinite(lpx)) throw std::runtime_error("run_dram: target is not finite at the start point");

  detail::RunningCovariance history(d);
  std::size_t accepted = 0;
  auto evaluate = [&](const Eigen::VectorXd& y, Evaluation& out) {
    if (!detail::in_box(y, problem.lower, problem.upper)) {
      out = {0.0, {}, false};
      return -std::numeric_limits<double>::infinity();
    }
    out = problem.target(y);
    if (!out.ok) ++chain.failed_evaluations;
    return log_post(out);
  };

  for (Eigen::Index i = 0; i < n; ++i) {
    Stage st = Stage::rejected;
    const Eigen::VectorXd y1 = x + L1 * gaussian();
    Evaluation e1;
    const double lp1 = evaluate(y1, e1);
    const double log_a1 = std::min(0.0, lp1 - lpx);
    if (std::isfinite(lp1) && std::log(uniform01(rng)) < log_a1) {
      x = y1;
      ex = std::move(e1);
      lpx = lp1;
      st = Stage::first;
    } else if (cfg.delayed_rejection) {
      const Eigen::VectorXd y2 = x + L2 * gaussian();
      Evaluation e2;
      const double lp2 = evaluate(y2, e2);
      if (std::isfinite(lp2)) {
        // Two-stage ratio: pi(y2) q1(y2,y1) (1 - a1(y2,y1)) / [pi(x) q1(x,y1) (1 - a1(x,y1))].
        const auto l1 = L1.triangularView<Eigen::Lower>();
        const double q_num = -0.5 * l1.solve(y1 - y2).squaredNorm();
        const double q_den = -0.5 * l1.solve(y1 - x).squaredNorm();
        const double a1_rev = std::isfinite(lp1) ? std::min(1.0, std::exp(lp1 - lp2)) : 0.0;
        const double a1_fwd = std::exp(log_a1);
        double log_a2 = -std::numeric_limits<double>::infinity();
        if (a1_rev < 1.0 && a1_fwd < 1.0)
          log_a2 = lp2 - lpx + q_num - q_den + std::log1p(-a1_rev) - std::log1p(-a1_fwd);
        if (std::log(uniform01(rng)) < std::min(0.0, log_a2)) {
          x = y2;
          ex = std::move(e2);
          lpx = lp2;
          st = Stage::delayed;
        }
      }
    }

    if (sample_phi) {
      const auto v = sample_variance_posterior(ex.sse, problem.variance.n_data, phi_rng,
                                               problem.variance.prior, problem.variance.convention);
      for (Eigen::Index j = 0; j < channels; ++j) phi[j] = v.phi[static_cast<std::size_t>(j)];
      lpx = log_post(ex);
    }

    chain.draws.row(i) = x.transpose();
    chain.log_posterior[i] = lpx;
    if (sample_phi) chain.phi.row(i) = phi.transpose();
    chain.stage.push_back(st);
    history.add(x);
    accepted += st != Stage::rejected;

    // Adapting from a history that has barely moved would collapse the proposal.
    if (cfg.adapt && (i + 1) % static_cast<Eigen::Index>(cfg.adapt_interval) == 0 &&
        accepted > static_cast<std::size_t>(d)) {
      Eigen::MatrixXd c = sd_scale * (history.covariance() +
                                      cfg.epsilon * Eigen::MatrixXd::Identity(d, d));
      L1 = detail::robust_cholesky(c, cfg.epsilon);
      L2 = cfg.dr_shrink * L1;
    }
  }
  return chain;
}

}  // namespace uasml
