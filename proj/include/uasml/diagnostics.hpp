#pragma once

// Chain summaries and convergence checks: Geweke's mean-comparison test,
// per-parameter statistics, effective sample size, and a one-sample
// Kolmogorov-Smirnov statistic.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace uasml {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Median of a copy of v (mean of the two middle values for even sizes).
inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sample");
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

/// Sample standard deviation (n - 1 denominator); zero for a single value.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Spectral density at frequency zero, Bartlett window with `lags` lags.
/// Zero lags gives the plain (population) variance.
inline double spectral_density_zero(const Eigen::Ref<const Eigen::VectorXd>& x, std::size_t lags) {
  const auto n = x.size();
  const double mean = x.mean();
  const Eigen::VectorXd c = x.array() - mean;
  double s = c.squaredNorm() / static_cast<double>(n);
  for (std::size_t k = 1; k <= lags && static_cast<Eigen::Index>(k) < n; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    const double gamma = c.head(n - kk).dot(c.tail(n - kk)) / static_cast<double>(n);
    s += 2.0 * (1.0 - static_cast<double>(k) / static_cast<double>(lags + 1)) * gamma;
  }
  return s;
}

struct GewekeResult {
  double z = 0.0;
  double p = 1.0;
};

inline GewekeResult geweke(const Eigen::Ref<const Eigen::VectorXd>& x, double first_fraction = 0.1,
                           double last_fraction = 0.5, std::size_t window_lags = 0) {
  if (x.size() < 100) throw std::invalid_argument("geweke: need at least 100 draws");
  if (!(first_fraction > 0) || !(last_fraction > 0) || first_fraction + last_fraction > 1.0)
    throw std::invalid_argument("geweke: bad segment fractions");
  const auto n = x.size();
  const auto n1 = static_cast<Eigen::Index>(std::floor(first_fraction * static_cast<double>(n)));
  const auto n2 = static_cast<Eigen::Index>(std::floor(last_fraction * static_cast<double>(n)));
  const auto a = x.head(n1), b = x.tail(n2);
  const double va = spectral_density_zero(a, window_lags) / static_cast<double>(n1);
  const double vb = spectral_density_zero(b, window_lags) / static_cast<double>(n2);
  if (!(va > 0) || !(vb > 0)) throw std::invalid_argument("geweke: zero-variance segment");
  GewekeResult r;
  r.z = (a.mean() - b.mean()) / std::sqrt(va + vb);
  r.p = 2.0 * (1.0 - normal_cdf(std::abs(r.z)));
  return r;
}

/// Geweke test for every column of a draw matrix.
inline std::vector<GewekeResult> geweke_columns(const Eigen::MatrixXd& draws, double first_fraction,
                                                double last_fraction, std::size_t window_lags = 0) {
  std::vector<GewekeResult> out;
  for (Eigen::Index j = 0; j < draws.cols(); ++j)
    out.push_back(geweke(draws.col(j), first_fraction, last_fraction, window_lags));
  return out;
}

struct ParameterStats {
  double mean = 0.0;
  double median = 0.0;
  double std = 0.0;
};

inline std::vector<ParameterStats> chain_stats(const Eigen::MatrixXd& draws) {
  if (draws.rows() < 2) throw std::invalid_argument("chain_stats: need at least two draws");
  std::vector<ParameterStats> out;
  for (Eigen::Index j = 0; j < draws.cols(); ++j) {
    std::vector<double> v(draws.col(j).data(), draws.col(j).data() + draws.rows());
    out.push_back({draws.col(j).mean(), median(v), sample_std(v)});
  }
  return out;
}

/// Effective sample size from Geyer's initial positive sequence.
inline double effective_sample_size(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const auto n = x.size();
  if (n < 4) return static_cast<double>(n);
  const Eigen::VectorXd c = x.array() - x.mean();
  const double var = c.squaredNorm() / static_cast<double>(n);
  if (!(var > 0)) return 1.0;
  auto rho = [&](Eigen::Index k) {
    return c.head(n - k).dot(c.tail(n - k)) / (static_cast<double>(n) * var);
  };
  double sum = 0.0;
  for (Eigen::Index m = 0; 2 * m + 1 < n; ++m) {
    const double pair = rho(2 * m) + rho(2 * m + 1);
    if (pair <= 0) break;
    sum += pair;
  }
  const double tau = std::max(1.0, 2.0 * sum - 1.0);
  return static_cast<double>(n) / tau;
}

/// sup |F_n - F| for a continuous reference CDF.
inline double ks_statistic(std::vector<double> x, const std::function<double(double)>& cdf) {
  if (x.empty()) throw std::invalid_argument("ks_statistic: empty sample");
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace uasml
