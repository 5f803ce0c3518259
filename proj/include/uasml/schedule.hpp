#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace uasml {

/// Manipulated flows of the reactor, L/h.
struct ReactorInputs {
  double Qi = 0.0;  // initiator
  double Qs = 0.0;  // solvent
  double Qm = 0.0;  // monomer
  double Qc = 0.0;  // cooling-jacket fluid

  static constexpr std::size_t size = 4;
  static constexpr const char* names[size] = {"Qi", "Qs", "Qm", "Qc"};

  double operator[](std::size_t i) const {
    switch (i) {
      case 0: return Qi;
      case 1: return Qs;
      case 2: return Qm;
      case 3: return Qc;
    }
    throw std::out_of_range("ReactorInputs index");
  }
  double& operator[](std::size_t i) {
    switch (i) {
      case 0: return Qi;
      case 1: return Qs;
      case 2: return Qm;
      case 3: return Qc;
    }
    throw std::out_of_range("ReactorInputs index");
  }

  bool valid() const { return Qi >= 0 && Qs >= 0 && Qm >= 0 && Qc >= 0; }
  friend bool operator==(const ReactorInputs&, const ReactorInputs&) = default;
};

/// Piecewise-constant input sequence: level k holds on
/// [start + k*hold, start + (k+1)*hold).
struct InputSchedule {
  std::vector<ReactorInputs> step_levels;
  double hold_duration = 150.0;  // h
  double start_time = 0.0;

  std::size_t steps() const noexcept { return step_levels.size(); }
  double duration() const noexcept { return static_cast<double>(steps()) * hold_duration; }
  double end_time() const noexcept { return start_time + duration(); }
  double step_start(std::size_t k) const noexcept {
    return start_time + static_cast<double>(k) * hold_duration;
  }

  /// Index of the step in force at time t (the final step extends to end_time).
  std::size_t step_at(double t) const {
    if (step_levels.empty()) throw std::logic_error("empty input schedule");
    if (t < start_time) throw std::out_of_range("time before schedule start");
    auto k = static_cast<std::size_t>(std::floor((t - start_time) / hold_duration));
    // Guard against t slightly below a boundary being floored one step early.
    if (k + 1 < steps() && t >= step_start(k + 1)) ++k;
    return k < steps() ? k : steps() - 1;
  }

  const ReactorInputs& inputs_at(double t) const { return step_levels[step_at(t)]; }

  void validate() const {
    if (step_levels.empty()) throw std::invalid_argument("input schedule has no steps");
    if (!(hold_duration > 0)) throw std::invalid_argument("hold duration must be positive");
    for (const auto& u : step_levels)
      if (!u.valid()) throw std::invalid_argument("negative flow in input schedule");
  }
};

/// Uniform sample grid start, start+dt, ... strictly before end.
inline std::vector<double> uniform_grid(double start, double end, double dt) {
  if (!(dt > 0) || !(end > start)) throw std::invalid_argument("uniform_grid: bad range");
  std::vector<double> g;
  const auto n = static_cast<std::size_t>(std::ceil((end - start) / dt - 1e-9));
  g.reserve(n);
  for (std::size_t k = 0; k < n; ++k) g.push_back(start + static_cast<double>(k) * dt);
  return g;
}

}  // namespace uasml
