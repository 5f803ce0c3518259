#pragma once

// Dormand-Prince 5(4) embedded Runge-Kutta integrator with adaptive step size
// control. The integrator advances a fixed-size state between caller-chosen
// stop times; callers restart it at discontinuities of the right-hand side.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>

namespace uasml {

struct OdeOptions {
  double rtol = 1e-8;
  double atol = 1e-10;
  double min_step = 1e-12;  // relative to max(1, |t|)
  double max_step = std::numeric_limits<double>::infinity();
  std::size_t max_steps = 10'000'000;
  double blowup = 1e12;
};

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, double time_reached)
      : std::runtime_error(what + " at t=" + std::to_string(time_reached)),
        time_reached_(time_reached) {}
  double time_reached() const noexcept { return time_reached_; }

 private:
  double time_reached_;
};

template <std::size_t N>
class DormandPrince {
 public:
  using State = std::array<double, N>;

  explicit DormandPrince(OdeOptions options = {}) : opt_(options) {}

  const OdeOptions& options() const noexcept { return opt_; }
  std::size_t steps_taken() const noexcept { return steps_; }
  std::size_t rejected_steps() const noexcept { return rejected_; }

  /// Forget the step size and the cached derivative. Must be called whenever
  /// the right-hand side changes discontinuously.
  void restart() noexcept {
    h_ = 0.0;
    have_fsal_ = false;
  }

  /// Advance y from t to t_end. On return t == t_end exactly.
  template <class F>
  void advance(F&& f, double& t, State& y, double t_end) {
    if (!(t_end >= t)) throw std::invalid_argument("DormandPrince::advance: t_end < t");
    if (t_end == t) return;
    if (!have_fsal_) {
      f(t, y, k1_);
      have_fsal_ = true;
      check_finite(k1_, t);
    }
    if (h_ <= 0.0) h_ = initial_step(f, t, y, t_end - t);

    while (t < t_end) {
      if (++steps_ > opt_.max_steps) throw IntegrationError("step budget exhausted", t);
      double h = std::min({h_, t_end - t, opt_.max_step});
      const bool clipped = h < h_;
      const double h_unclipped = h_;

      State ynew, err;
      stage(f, t, y, h, ynew, err);
      const double err_norm = error_norm(y, ynew, err);

      if (err_norm <= 1.0 && std::isfinite(err_norm)) {
        t = (t_end - (t + h) <= 1e-14 * std::max(1.0, std::abs(t_end))) ? t_end : t + h;
        y = ynew;
        k1_ = k7_;
        check_state(y, t);
        double fac = err_norm == 0.0 ? kMaxFactor
                                     : std::clamp(kSafety * std::pow(err_norm, -0.2),
                                                  kMinFactor, kMaxFactor);
        h_ = h * fac;
        if (clipped) h_ = std::max(h_, h_unclipped);
      } else {
        ++rejected_;
        double fac = std::isfinite(err_norm)
                         ? std::clamp(kSafety * std::pow(err_norm, -0.2), kMinFactor, 1.0)
                         : kMinFactor;
        h_ = h * fac;
        if (h_ < opt_.min_step * std::max(1.0, std::abs(t)))
          throw IntegrationError("step size underflow", t);
      }
    }
  }

 private:
  static constexpr double kSafety = 0.9;
  static constexpr double kMinFactor = 0.2;
  static constexpr double kMaxFactor = 5.0;

  // Dormand-Prince coefficients.
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

  template <class F>
  void stage(F& f, double t, const State& y, double h, State& ynew, State& err) {
    State k2, k3, k4, k5, k6, tmp;
    for (std::size_t i = 0; i < N; ++i) tmp[i] = y[i] + h * a21 * k1_[i];
    f(t + c2 * h, tmp, k2);
    for (std::size_t i = 0; i < N; ++i) tmp[i] = y[i] + h * (a31 * k1_[i] + a32 * k2[i]);
    f(t + c3 * h, tmp, k3);
    for (std::size_t i = 0; i < N; ++i)
      tmp[i] = y[i] + h * (a41 * k1_[i] + a42 * k2[i] + a43 * k3[i]);
    f(t + c4 * h, tmp, k4);
    for (std::size_t i = 0; i < N; ++i)
      tmp[i] = y[i] + h * (a51 * k1_[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    f(t + c5 * h, tmp, k5);
    for (std::size_t i = 0; i < N; ++i)
      tmp[i] = y[i] + h * (a61 * k1_[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
    f(t + h, tmp, k6);
    for (std::size_t i = 0; i < N; ++i)
      ynew[i] = y[i] + h * (b1 * k1_[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
    f(t + h, ynew, k7_);
    for (std::size_t i = 0; i < N; ++i)
      err[i] = h * (e1 * k1_[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7_[i]);
  }

  double error_norm(const State& y, const State& ynew, const State& err) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double sc = opt_.atol + opt_.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      const double r = err[i] / sc;
      acc += r * r;
    }
    return std::sqrt(acc / static_cast<double>(N));
  }

  // Hairer, Norsett & Wanner starting step heuristic.
  template <class F>
  double initial_step(F& f, double t, const State& y, double span) {
    double d0 = 0.0, d1 = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double sc = opt_.atol + opt_.rtol * std::abs(y[i]);
      d0 += (y[i] / sc) * (y[i] / sc);
      d1 += (k1_[i] / sc) * (k1_[i] / sc);
    }
    d0 = std::sqrt(d0 / N);
    d1 = std::sqrt(d1 / N);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, span);
    State y1, f1;
    for (std::size_t i = 0; i < N; ++i) y1[i] = y[i] + h0 * k1_[i];
    f(t + h0, y1, f1);
    double d2 = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double sc = opt_.atol + opt_.rtol * std::abs(y[i]);
      const double r = (f1[i] - k1_[i]) / sc;
      d2 += r * r;
    }
    d2 = std::sqrt(d2 / N) / h0;
    const double dmax = std::max(d1, d2);
    const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 0.2);
    return std::min({100.0 * h0, h1, span, opt_.max_step});
  }

  void check_finite(const State& v, double t) const {
    for (double x : v)
      if (!std::isfinite(x)) throw IntegrationError("non-finite derivative", t);
  }

  void check_state(const State& v, double t) const {
    for (double x : v)
      if (!std::isfinite(x) || std::abs(x) > opt_.blowup)
        throw IntegrationError("state blow-up", t);
  }

  OdeOptions opt_;
  double h_ = 0.0;
  bool have_fsal_ = false;
  State k1_{}, k7_{};
  std::size_t steps_ = 0;
  std::size_t rejected_ = 0;
};

}  // namespace uasml
