#pragma once

// Continuous polymerization reactor: initiator and monomer balances, reactor
// and jacket energy balances, and the first three moments of the dead-polymer
// chain-length distribution. The algebraic relations (live-radical
// concentration, total flow, molecular weight, polydispersity, viscosity) are
// explicit, so they are substituted into the balances and the system is
// integrated as a plain ODE.
//
// Units: time in hours. The heat-transfer coefficient hA is taken as J/(K h),
// so hA / (rho Cp V) is a lumped rate in 1/h.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "uasml/io.hpp"
#include "uasml/ode.hpp"
#include "uasml/schedule.hpp"

namespace uasml {

struct ReactorParameters {
  double Ad = 2.142e17;   // 1/h
  double Ed = 14897.0;    // K
  double Ap = 3.81e10;    // L/(mol h)
  double Ep = 3557.0;     // K
  double At = 4.50e12;    // L/(mol h)
  double Et = 843.0;      // K
  double fi = 0.6;
  double dHr = 6.99e4;    // J/mol, stored as -dHr
  double hA = 1.05e6;     // J/(K h)
  double rhoCp = 1506.0;  // J/(K L)
  double rhocCpc = 4043.0;
  double Mm = 104.14;     // g/mol
  double V = 3000.0;      // L
  double Vc = 3312.4;     // L
  double If = 0.5888;     // mol/L
  double Mf = 8.6981;     // mol/L
  double Tf = 330.0;      // K
  double Tcf = 295.0;     // K

  static constexpr std::size_t size = 18;
  static constexpr std::array<const char*, size> names = {
      "Ad", "Ed", "Ap", "Ep", "At", "Et", "fi", "dHr", "hA",
      "rhoCp", "rhocCpc", "Mm", "V", "Vc", "If", "Mf", "Tf", "Tcf"};

  std::array<double, size> to_array() const {
    return {Ad, Ed, Ap, Ep, At, Et, fi, dHr, hA, rhoCp, rhocCpc, Mm, V, Vc, If, Mf, Tf, Tcf};
  }

  static ReactorParameters from_array(const std::array<double, size>& a) {
    ReactorParameters p;
    p.Ad = a[0]; p.Ed = a[1]; p.Ap = a[2]; p.Ep = a[3]; p.At = a[4]; p.Et = a[5];
    p.fi = a[6]; p.dHr = a[7]; p.hA = a[8]; p.rhoCp = a[9]; p.rhocCpc = a[10];
    p.Mm = a[11]; p.V = a[12]; p.Vc = a[13]; p.If = a[14]; p.Mf = a[15];
    p.Tf = a[16]; p.Tcf = a[17];
    return p;
  }

  /// Parameters scaled elementwise by a nominal-relative vector.
  ReactorParameters scaled(const Eigen::Ref<const Eigen::VectorXd>& relative) const {
    if (relative.size() != static_cast<Eigen::Index>(size))
      throw std::invalid_argument("scaled: expected 18 relative factors");
    auto a = to_array();
    for (std::size_t i = 0; i < size; ++i) a[i] *= relative[static_cast<Eigen::Index>(i)];
    return from_array(a);
  }

  void validate() const {
    const auto a = to_array();
    for (std::size_t i = 0; i < size; ++i)
      if (!(a[i] > 0) || !std::isfinite(a[i]))
        throw std::invalid_argument(std::string("reactor parameter must be positive: ") +
                                    names[i]);
    if (fi > 1.0) throw std::invalid_argument("initiator efficiency must not exceed 1");
  }
};

struct ReactorState {
  double I = 0.0;   // mol/L
  double M = 0.0;   // mol/L
  double T = 0.0;   // K
  double Tc = 0.0;  // K
  double D0 = 0.0;  // mol/L
  double D1 = 0.0;  // g/L
  double D2 = 0.0;

  static constexpr std::size_t size = 7;
  static constexpr std::array<const char*, size> names = {"I", "M", "T", "Tc", "D0", "D1", "D2"};
  using Array = std::array<double, size>;

  Array to_array() const { return {I, M, T, Tc, D0, D1, D2}; }
  static ReactorState from_array(const Array& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
  }

  bool valid() const {
    return I >= 0 && M >= 0 && D0 >= 0 && D1 >= 0 && D2 >= 0 && T > 0 && Tc > 0;
  }
};

struct RateConstants {
  double kd = 0.0;  // 1/h
  double kp = 0.0;  // L/(mol h)
  double kt = 0.0;  // L/(mol h)
};

struct AlgebraicOutputs {
  double P = 0.0;    // mol/L
  double Qt = 0.0;   // L/h
  double Mw = 0.0;   // g/mol, NaN when D1 == 0
  double PD = 0.0;   // NaN when D1 == 0
  double eta = 0.0;  // NaN when D1 == 0

  static constexpr std::size_t size = 5;
  static constexpr std::array<const char*, size> names = {"P", "Qt", "Mw", "PD", "eta"};

  bool molecular_weight_defined() const { return !std::isnan(Mw); }
};

/// Switches for three terms of the printed model that admit a physically
/// different reading. Defaults reproduce the equations as printed.
struct ModelVariant {
  enum class EnergyBalanceFlow { as_printed_Qi, total_flow_Qt };
  enum class JacketCapacity { as_printed_rhoCpV, physical_rhocCpcVc };
  enum class PolydispersityFactor { as_printed_with_Mm, without_Mm };

  EnergyBalanceFlow energy_balance_flow = EnergyBalanceFlow::as_printed_Qi;
  JacketCapacity jacket_capacity = JacketCapacity::as_printed_rhoCpV;
  PolydispersityFactor pd_mm_factor = PolydispersityFactor::as_printed_with_Mm;

  static ModelVariant physical() {
    return {EnergyBalanceFlow::total_flow_Qt, JacketCapacity::physical_rhocCpcVc,
            PolydispersityFactor::without_Mm};
  }
  friend bool operator==(const ModelVariant&, const ModelVariant&) = default;
};

inline RateConstants rate_constants(double T, const ReactorParameters& p) {
  if (!(T > 0) || !std::isfinite(T))
    throw std::domain_error("rate_constants: temperature must be positive and finite");
  return {p.Ad * std::exp(-p.Ed / T), p.Ap * std::exp(-p.Ep / T), p.At * std::exp(-p.Et / T)};
}

namespace detail {

inline double live_radicals(double I, const ReactorParameters& p, const RateConstants& k) {
  return std::sqrt(std::max(0.0, 2.0 * p.fi * k.kd * I / k.kt));
}

inline void check_finite(const ReactorState& s, const ReactorInputs& u) {
  for (double x : s.to_array())
    if (std::isnan(x)) throw std::domain_error("reactor: NaN state component");
  for (std::size_t i = 0; i < ReactorInputs::size; ++i)
    if (std::isnan(u[i])) throw std::domain_error("reactor: NaN input");
}

}  // namespace detail

inline AlgebraicOutputs algebraic_outputs(const ReactorState& s, const ReactorInputs& u,
                                          const ReactorParameters& p,
                                          const ModelVariant& variant = {}) {
  detail::check_finite(s, u);
  const RateConstants k = rate_constants(s.T, p);
  AlgebraicOutputs out;
  out.P = detail::live_radicals(s.I, p, k);
  out.Qt = u.Qi + u.Qs + u.Qm;
  if (s.D1 > 0) {
    out.Mw = p.Mm * s.D2 / s.D1;
    const double pd = s.D2 * s.D0 / (s.D1 * s.D1);
    out.PD = variant.pd_mm_factor == ModelVariant::PolydispersityFactor::as_printed_with_Mm
                 ? p.Mm * pd
                 : pd;
    out.eta = 0.0012 * std::pow(out.Mw, 0.71);
  } else {
    out.Mw = out.PD = out.eta = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

/// Time derivatives of the seven states.
inline ReactorState::Array reactor_rhs_array(const ReactorState::Array& y, const ReactorInputs& u,
                                             const ReactorParameters& p,
                                             const ModelVariant& variant) {
  const double I = y[0], M = y[1], T = y[2], Tc = y[3], D0 = y[4], D1 = y[5], D2 = y[6];
  const RateConstants k = rate_constants(T, p);
  const double P = detail::live_radicals(I, p, k);
  const double Qt = u.Qi + u.Qs + u.Qm;
  const double propagation = k.kp * M * P;
  const double exchange_reactor = p.hA / (p.rhoCp * p.V) * (T - Tc);
  const double exchange_jacket =
      variant.jacket_capacity == ModelVariant::JacketCapacity::as_printed_rhoCpV
          ? exchange_reactor
          : p.hA / (p.rhocCpc * p.Vc) * (T - Tc);
  const double feed_flow =
      variant.energy_balance_flow == ModelVariant::EnergyBalanceFlow::as_printed_Qi ? u.Qi : Qt;

  ReactorState::Array dy;
  dy[0] = (u.Qi * p.If - Qt * I) / p.V - k.kd * I;
  dy[1] = (u.Qm * p.Mf - Qt * M) / p.V - propagation;
  dy[2] = feed_flow * (p.Tf - T) / p.V + p.dHr / p.rhoCp * propagation - exchange_reactor;
  dy[3] = u.Qc * (p.Tcf - Tc) / p.Vc + exchange_jacket;
  dy[4] = 0.5 * k.kt * P * P - Qt * D0 / p.V;
  dy[5] = p.Mm * propagation - Qt * D1 / p.V;
  dy[6] = 5.0 * p.Mm * propagation + p.Mm * k.kp * k.kp / k.kt * M * M - Qt * D2 / p.V;
  return dy;
}

inline ReactorState reactor_rhs(double /*t*/, const ReactorState& s, const ReactorInputs& u,
                                const ReactorParameters& p, const ModelVariant& variant = {}) {
  detail::check_finite(s, u);
  return ReactorState::from_array(reactor_rhs_array(s.to_array(), u, p, variant));
}

/// Per-component scale max(|reference|, 1) used for residual norms.
inline ReactorState::Array residual_scale(const ReactorState& reference) {
  ReactorState::Array s = reference.to_array();
  for (double& x : s) x = std::max(std::abs(x), 1.0);
  return s;
}

inline double normalized_residual(const ReactorState& s, const ReactorInputs& u,
                                  const ReactorParameters& p, const ModelVariant& variant,
                                  const ReactorState& reference) {
  const auto r = reactor_rhs_array(s.to_array(), u, p, variant);
  const auto sc = residual_scale(reference);
  double m = 0.0;
  for (std::size_t i = 0; i < ReactorState::size; ++i) m = std::max(m, std::abs(r[i]) / sc[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Trajectories

struct Trajectory {
  std::vector<double> times;
  std::vector<ReactorInputs> inputs;
  std::vector<ReactorState> states;
  std::vector<AlgebraicOutputs> outputs;

  static constexpr std::array<const char*, 17> csv_header = {
      "time", "Qi", "Qs", "Qm", "Qc", "I", "M", "T", "Tc",
      "D0", "D1", "D2", "P", "Qt", "Mw", "PD", "eta"};

  std::size_t size() const noexcept { return times.size(); }

  void validate() const {
    const auto n = times.size();
    if (n < 2) throw std::invalid_argument("trajectory needs at least two samples");
    if (inputs.size() != n || states.size() != n || outputs.size() != n)
      throw std::invalid_argument("trajectory series lengths differ");
    for (std::size_t k = 1; k < n; ++k)
      if (!(times[k] > times[k - 1]))
        throw std::invalid_argument("trajectory times not strictly increasing");
  }

  /// Values of one named channel (any CSV column except time).
  std::vector<double> channel(std::string_view name) const {
    std::vector<double> v;
    v.reserve(size());
    const auto idx = column_index(name);
    for (std::size_t k = 0; k < size(); ++k) v.push_back(value(k, idx));
    return v;
  }

  void set_channel(std::string_view name, const std::vector<double>& values) {
    if (values.size() != size()) throw std::invalid_argument("set_channel: length mismatch");
    const auto idx = column_index(name);
    for (std::size_t k = 0; k < size(); ++k) value_ref(k, idx) = values[k];
  }

  io::Table to_table() const {
    io::Table t;
    t.header.assign(csv_header.begin(), csv_header.end());
    t.rows.reserve(size());
    for (std::size_t k = 0; k < size(); ++k) {
      std::vector<double> row;
      row.reserve(csv_header.size());
      row.push_back(times[k]);
      for (std::size_t c = 1; c < csv_header.size(); ++c) row.push_back(value(k, c));
      t.rows.push_back(std::move(row));
    }
    return t;
  }

  static Trajectory from_table(const io::Table& t) {
    if (t.header.size() != csv_header.size())
      throw std::runtime_error("trajectory csv: unexpected column count");
    for (std::size_t c = 0; c < csv_header.size(); ++c)
      if (t.header[c] != csv_header[c])
        throw std::runtime_error("trajectory csv: unexpected column " + t.header[c]);
    Trajectory tr;
    const auto n = t.rows.size();
    tr.times.resize(n);
    tr.inputs.resize(n);
    tr.states.resize(n);
    tr.outputs.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      tr.times[k] = t.rows[k][0];
      for (std::size_t c = 1; c < csv_header.size(); ++c) tr.value_ref(k, c) = t.rows[k][c];
    }
    return tr;
  }

  void write_csv(const std::filesystem::path& path) const { io::write_table(path, to_table()); }
  static Trajectory read_csv(const std::filesystem::path& path) {
    return from_table(io::read_table(path));
  }

 private:
  static std::size_t column_index(std::string_view name) {
    for (std::size_t c = 1; c < csv_header.size(); ++c)
      if (name == csv_header[c]) return c;
    throw std::invalid_argument("unknown trajectory channel: " + std::string(name));
  }

  double value(std::size_t k, std::size_t c) const {
    return const_cast<Trajectory*>(this)->value_ref(k, c);
  }

  double& value_ref(std::size_t k, std::size_t c) {
    if (c >= 1 && c <= 4) return inputs[k][c - 1];
    ReactorState& s = states[k];
    AlgebraicOutputs& o = outputs[k];
    switch (c) {
      case 5: return s.I;
      case 6: return s.M;
      case 7: return s.T;
      case 8: return s.Tc;
      case 9: return s.D0;
      case 10: return s.D1;
      case 11: return s.D2;
      case 12: return o.P;
      case 13: return o.Qt;
      case 14: return o.Mw;
      case 15: return o.PD;
      case 16: return o.eta;
    }
    throw std::out_of_range("trajectory column");
  }
};

/// Integrate the reactor over the sample grid, restarting the integrator at
/// every input step. States are reported exactly at the grid points.
inline Trajectory integrate(const ReactorState& y0, const InputSchedule& schedule,
                            const ReactorParameters& params, const ModelVariant& variant,
                            const std::vector<double>& grid, const OdeOptions& options = {}) {
  schedule.validate();
  if (grid.size() < 2) throw std::invalid_argument("integrate: grid needs two points");
  for (std::size_t k = 1; k < grid.size(); ++k)
    if (!(grid[k] > grid[k - 1]))
      throw std::invalid_argument("integrate: grid not strictly increasing");
  if (grid.front() < schedule.start_time || grid.back() > schedule.end_time())
    throw std::invalid_argument("integrate: schedule does not cover the grid");
  if (!y0.valid()) throw std::invalid_argument("integrate: initial state violates invariants");

  Trajectory tr;
  const auto n = grid.size();
  tr.times = grid;
  tr.inputs.reserve(n);
  tr.states.reserve(n);
  tr.outputs.reserve(n);

  auto record = [&](const ReactorState::Array& y, double t) {
    const ReactorInputs& u = schedule.inputs_at(t);
    const ReactorState s = ReactorState::from_array(y);
    tr.inputs.push_back(u);
    tr.states.push_back(s);
    tr.outputs.push_back(algebraic_outputs(s, u, params, variant));
  };

  DormandPrince<ReactorState::size> solver(options);
  ReactorState::Array y = y0.to_array();
  double t = grid.front();
  std::size_t step = schedule.step_at(t);
  ReactorInputs u = schedule.step_levels[step];
  auto f = [&](double, const ReactorState::Array& x, ReactorState::Array& dx) {
    dx = reactor_rhs_array(x, u, params, variant);
  };
  record(y, t);
  for (std::size_t k = 1; k < n; ++k) {
    const double target = grid[k];
    while (t < target) {
      const double boundary =
          step + 1 < schedule.steps() ? schedule.step_start(step + 1) : schedule.end_time();
      const double stop = std::min(target, boundary);
      solver.advance(f, t, y, stop);
      if (t >= boundary && step + 1 < schedule.steps()) {
        ++step;
        u = schedule.step_levels[step];
        solver.restart();
      }
    }
    record(y, t);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Steady state

class SteadyStateError : public std::runtime_error {
 public:
  SteadyStateError(const std::string& what, double best_residual)
      : std::runtime_error(what + " (best residual " + std::to_string(best_residual) + ")"),
        best_residual_(best_residual) {}
  double best_residual() const noexcept { return best_residual_; }

 private:
  double best_residual_;
};

struct SteadyStateOptions {
  double tolerance = 1e-9;  // max normalized |rhs|
  int max_newton_iterations = 60;
  double fallback_horizon = 2000.0;  // h of constant-input integration
  bool require_stable = true;        // reject equilibria with unstable modes
};

namespace detail {

struct NewtonResult {
  ReactorState::Array y;
  double residual;
  bool converged;
};

inline double scaled_norm(const ReactorState::Array& r, const ReactorState::Array& scale) {
  double m = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) m = std::max(m, std::abs(r[i]) / scale[i]);
  return m;
}

inline NewtonResult damped_newton(ReactorState::Array y, const ReactorInputs& u,
                                  const ReactorParameters& p, const ModelVariant& v,
                                  const SteadyStateOptions& opt) {
  constexpr std::size_t n = ReactorState::size;
  auto F = [&](const ReactorState::Array& x) { return reactor_rhs_array(x, u, p, v); };
  auto scale_of = [](const ReactorState::Array& x) {
    ReactorState::Array s;
    for (std::size_t i = 0; i < n; ++i) s[i] = std::max(std::abs(x[i]), 1.0);
    return s;
  };
  ReactorState::Array r;
  try {
    r = F(y);
  } catch (const std::domain_error&) {
    return {y, std::numeric_limits<double>::infinity(), false};
  }
  double res = scaled_norm(r, scale_of(y));
  ReactorState::Array best = y;
  double best_res = res;
  for (int it = 0; it < opt.max_newton_iterations && res >= opt.tolerance; ++it) {
    Eigen::Matrix<double, n, n> J;
    for (std::size_t j = 0; j < n; ++j) {
      ReactorState::Array yp = y;
      const double h = 1e-7 * std::max(std::abs(y[j]), 1e-6);
      yp[j] += h;
      const auto rp = F(yp);
      for (std::size_t i = 0; i < n; ++i) J(i, j) = (rp[i] - r[i]) / h;
    }
    Eigen::Matrix<double, n, 1> rhs;
    for (std::size_t i = 0; i < n; ++i) rhs[i] = -r[i];
    const Eigen::Matrix<double, n, 1> dx = J.fullPivLu().solve(rhs);
    if (!dx.allFinite()) break;

    double lambda = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls, lambda *= 0.5) {
      ReactorState::Array trial;
      bool admissible = true;
      for (std::size_t i = 0; i < n; ++i) {
        trial[i] = y[i] + lambda * dx[static_cast<Eigen::Index>(i)];
        if (trial[i] < 0 || ((i == 2 || i == 3) && trial[i] <= 0)) admissible = false;
      }
      if (!admissible) continue;
      ReactorState::Array rt;
      try {
        rt = F(trial);
      } catch (const std::domain_error&) {
        continue;
      }
      const double tr = scaled_norm(rt, scale_of(trial));
      if (tr < res || (lambda < 1e-6 && tr <= res)) {
        y = trial;
        r = rt;
        res = tr;
        improved = true;
        break;
      }
    }
    if (res < best_res) {
      best = y;
      best_res = res;
    }
    if (!improved) break;
  }
  return {best, best_res, best_res < opt.tolerance};
}

/// Largest real part of the Jacobian spectrum at y.
inline double spectral_abscissa(const ReactorState::Array& y, const ReactorInputs& u,
                                const ReactorParameters& p, const ModelVariant& v) {
  constexpr std::size_t n = ReactorState::size;
  const auto r = reactor_rhs_array(y, u, p, v);
  Eigen::Matrix<double, n, n> J;
  for (std::size_t j = 0; j < n; ++j) {
    ReactorState::Array yp = y;
    const double h = 1e-7 * std::max(std::abs(y[j]), 1e-6);
    yp[j] += h;
    const auto rp = reactor_rhs_array(yp, u, p, v);
    for (std::size_t i = 0; i < n; ++i) J(i, j) = (rp[i] - r[i]) / h;
  }
  return Eigen::EigenSolver<Eigen::Matrix<double, n, n>>(J, false).eigenvalues().real().maxCoeff();
}

}  // namespace detail

/// Steady state for constant inputs: damped Newton with a finite-difference
/// Jacobian, falling back to a long constant-input integration when Newton
/// stalls or (by default) lands on an unstable equilibrium. The printed model
/// has more than one equilibrium for some flow settings.
inline ReactorState find_steady_state(const ReactorParameters& params, const ReactorInputs& inputs,
                                      const ModelVariant& variant, const ReactorState& guess,
                                      const SteadyStateOptions& options = {}) {
  if (!guess.valid()) throw std::invalid_argument("find_steady_state: guess violates invariants");
  params.validate();
  auto acceptable = [&](const detail::NewtonResult& r) {
    return r.converged &&
           (!options.require_stable || detail::spectral_abscissa(r.y, inputs, params, variant) < 0);
  };
  auto first = detail::damped_newton(guess.to_array(), inputs, params, variant, options);
  if (acceptable(first)) return ReactorState::from_array(first.y);

  double best = first.residual;
  try {
    InputSchedule constant{{inputs}, options.fallback_horizon, 0.0};
    OdeOptions ode;
    ode.rtol = 1e-10;
    ode.atol = 1e-12;
    const auto tr = integrate(guess, constant, params, variant, {0.0, options.fallback_horizon},
                              ode);
    auto second =
        detail::damped_newton(tr.states.back().to_array(), inputs, params, variant, options);
    if (acceptable(second)) return ReactorState::from_array(second.y);
    best = std::min(best, second.residual);
  } catch (const IntegrationError&) {
  }
  throw SteadyStateError("steady state did not converge", best);
}

/// A reasonable starting point for the steady-state search near the usual
/// operating window.
inline ReactorState default_steady_guess() {
  return {0.067, 3.3, 323.0, 305.0, 2.7e-4, 16.0, 4600.0};
}

}  // namespace uasml
