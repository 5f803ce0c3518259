#pragma once

// Stage commands of the methodology, run against one run directory:
//   excite -> simulate -> mcmc -> propagate -> lipschitz -> tune -> mctrain
//   -> datasize -> validate -> report
// Each stage reads declared upstream artifacts (digest-checked against the
// run manifest), writes only its own subdirectory and records its outputs.

#include <fcntl.h>
#include <openssl/evp.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/config.hpp"
#include "uasml/coverage.hpp"
#include "uasml/diagnostics.hpp"
#include "uasml/dram.hpp"
#include "uasml/ensemble.hpp"
#include "uasml/excitation.hpp"
#include "uasml/inference.hpp"
#include "uasml/io.hpp"
#include "uasml/mc_train.hpp"
#include "uasml/narx.hpp"
#include "uasml/tuner.hpp"
#include "uasml/uq.hpp"

namespace uasml {

inline constexpr const char* kToolVersion = "1.0.0";

class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string file_digest(const std::filesystem::path& p) { return sha256_hex(io::read_file(p)); }

/// Exclusive lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw std::runtime_error("run directory is locked by another command: " + path_.string());
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {
      // The lock is the file itself; its content is informational.
    }
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      std::filesystem::remove(path_, ec);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Run directory and manifest

class Run {
 public:
  Run(std::filesystem::path root, PipelineConfig cfg) : root_(std::move(root)), cfg_(std::move(cfg)) {
    std::filesystem::create_directories(root_);
    const auto m = root_ / "manifest.json";
    if (std::filesystem::exists(m)) manifest_ = ojson::parse(io::read_file(m));
    manifest_["tool"] = "uasml";
    manifest_["version"] = kToolVersion;
    manifest_["config_sha256"] = sha256_hex(config_text(cfg_));
    if (!manifest_.contains("stages")) manifest_["stages"] = ojson::object();
  }

  const PipelineConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& root() const noexcept { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }
  const ojson& manifest() const noexcept { return manifest_; }

  /// Verifies an upstream artifact against the digest its stage recorded.
  std::filesystem::path require(const std::string& rel) {
    std::string expected;
    for (const auto& [stage, entry] : manifest_.at("stages").items())
      if (entry.contains("outputs") && entry["outputs"].contains(rel)) expected = entry["outputs"][rel].get<std::string>();
    const auto p = path(rel);
    if (expected.empty()) throw DependencyError("no stage has produced " + rel);
    if (!std::filesystem::exists(p)) throw DependencyError("missing upstream artifact " + rel + " (sha256 " + expected + ")");
    const auto actual = file_digest(p);
    if (actual != expected)
      throw DependencyError("upstream artifact " + rel + " was modified: sha256 " + actual + ", manifest " + expected);
    inputs_[rel] = expected;
    return p;
  }

  /// Clears a stage directory before the stage writes into it.
  std::filesystem::path stage_dir(const std::string& stage) {
    const auto d = path(stage);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
  }

  void warn(const std::string& w) { warnings_.push_back(w); }

  /// Records every file under the stage directory with its digest.
  void finish(const std::string& stage, double seconds) {
    std::vector<std::string> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(path(stage)))
      if (e.is_regular_file()) files.push_back(std::filesystem::relative(e.path(), root_).generic_string());
    std::sort(files.begin(), files.end());
    ojson out = ojson::object();
    for (const auto& f : files) out[f] = file_digest(path(f));
    ojson in = ojson::object();
    for (const auto& [k, v] : inputs_) in[k] = v;
    manifest_["stages"][stage] = {{"config_sha256", manifest_["config_sha256"]}, {"inputs", in}, {"outputs", out},
                                  {"warnings", warnings_}};
    io::write_file(root_ / "manifest.json", manifest_.dump(2) + "\n");

    ojson timings = ojson::object();
    const auto tp = root_ / "timings.json";
    if (std::filesystem::exists(tp)) timings = ojson::parse(io::read_file(tp));
    timings[stage] = seconds;
    io::write_file(tp, timings.dump(2) + "\n");
    inputs_.clear();
    warnings_.clear();
  }

  /// Recomputes every recorded digest; returns the artifacts that differ.
  std::vector<std::string> audit() const {
    std::vector<std::string> bad;
    for (const auto& [stage, entry] : manifest_.at("stages").items())
      for (const auto& [rel, digest] : entry.at("outputs").items()) {
        const auto p = path(rel);
        if (!std::filesystem::exists(p) || file_digest(p) != digest.get<std::string>()) bad.push_back(rel);
      }
    return bad;
  }

 private:
  std::filesystem::path root_;
  PipelineConfig cfg_;
  ojson manifest_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> warnings_;
};

inline void write_json(const std::filesystem::path& p, const ojson& j) { io::write_file(p, j.dump(2) + "\n"); }
inline ojson read_json(const std::filesystem::path& p) { return ojson::parse(io::read_file(p)); }

// ---------------------------------------------------------------------------
// Shared builders

inline InputSchedule read_schedule(Run& run) {
  return schedule_from_table(io::read_table(run.require("excite/schedule.csv")), run.config().excitation.hold_hours);
}

inline ReactorExperiment make_experiment(const PipelineConfig& cfg, const InputSchedule& schedule) {
  ReactorExperiment ex;
  ex.nominal = cfg.reactor.parameters;
  ex.variant = cfg.reactor.model_variant();
  ex.steady_flows = cfg.reactor.steady_flows;
  ex.schedule = schedule;
  ex.grid = uniform_grid(schedule.start_time, schedule.end_time(), cfg.excitation.sample_period_hours);
  ex.ode.rtol = cfg.reactor.rtol;
  ex.ode.atol = cfg.reactor.atol;
  ex.steady_guess = find_steady_state(ex.nominal, ex.steady_flows, ex.variant, default_steady_guess());
  return ex;
}

inline std::size_t calibration_steps(const PipelineConfig& cfg) {
  const auto n = static_cast<std::size_t>(std::lround(cfg.excitation.calibration_fraction * static_cast<double>(cfg.excitation.steps)));
  return std::clamp<std::size_t>(n, 1, cfg.excitation.steps);
}

inline EnsembleDataset read_ensemble_data(Run& run, const InputSchedule& schedule) {
  const auto dir = run.path("propagate/ensemble");
  const auto m = read_json(run.require("propagate/ensemble/manifest.json"));
  run.require("propagate/ensemble/theta.csv");
  for (const auto& r : m.at("rows")) run.require("propagate/ensemble/traj_" + std::to_string(r.get<std::size_t>()) + ".csv");
  return read_ensemble(dir, schedule);
}

inline NarxConfig narx_for(Run& run, const std::string& target) {
  const auto& cfg = run.config();
  if (cfg.narx.lags == "fixed") return cfg.fixed_narx();
  const auto sel = read_json(run.require("lipschitz/selection.json")).at(target);
  if (sel.at("input_lag").is_null() || sel.at("output_lag").is_null())
    throw std::runtime_error("Lipschitz selection for " + target + " did not flatten; use fixed lags");
  NarxConfig c;
  c.input_lags = sel.at("input_lag").get<std::size_t>();
  c.output_lags = sel.at("output_lag").get<std::size_t>();
  c.include_current_input = cfg.narx.include_current_input;
  return c;
}

inline MlpSpec read_best_spec(Run& run, const std::string& target) {
  const auto j = read_json(run.require("tune/" + target + "/best.json"));
  MlpSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.activations.assign(s.hidden.size(), activation_from_string(j.at("activation").get<std::string>()));
  s.learning_rate = j.at("learning_rate").get<double>();
  return s;
}

inline EnsembleModel read_trained(Run& run, const std::string& target) {
  const auto dir = "mctrain/" + target;
  const auto s = read_json(run.require(dir + "/summary.json"));
  run.require(dir + "/metrics.csv");
  for (const auto& r : s.at("rows")) run.require(dir + "/member_" + std::to_string(r.get<std::size_t>()) + ".weights");
  return read_ensemble_model(run.path(dir));
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_excite(Run& run) {
  const auto& cfg = run.config();
  const auto dir = run.stage_dir("excite");
  Engine rng = make_stream(cfg.seeds.excitation, "excitation");
  const auto design = lhs_sample(cfg.excitation.steps, bounds_from_steady(cfg.reactor.steady_flows, cfg.excitation.fraction), rng);
  const auto schedule = to_schedule(design, cfg.excitation.hold_hours);
  io::write_table(dir / "schedule.csv", schedule_table(schedule));
  const auto corr = correlation_matrix(design);
  io::write_table(dir / "correlation.csv", matrix_table(corr, {"Qi", "Qs", "Qm", "Qc"}));
  ojson s;
  s["steps"] = cfg.excitation.steps;
  s["hold_hours"] = cfg.excitation.hold_hours;
  s["fraction"] = cfg.excitation.fraction;
  s["mean_abs_offdiag_correlation"] = mean_abs_off_diagonal(corr);
  write_json(dir / "summary.json", s);
}

inline void stage_simulate(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto dir = run.stage_dir("simulate");
  const auto ex = make_experiment(cfg, schedule);
  const auto tr = simulate_experiment(ex, ex.nominal);
  if (!tr) throw std::runtime_error("nominal simulation failed");
  tr->write_csv(dir / "nominal.csv");
  Engine rng = make_stream(cfg.seeds.noise, "calibration-noise");
  const auto observed = add_noise(*tr, cfg.excitation.noise_channels, cfg.excitation.noise_fraction, rng);
  observed.write_csv(dir / "observed.csv");
  ojson s;
  s["samples"] = tr->size();
  ojson steady;
  const auto st = ex.steady_guess.to_array();
  for (std::size_t i = 0; i < ReactorState::size; ++i) steady[ReactorState::names[i]] = st[i];
  s["steady_state"] = steady;
  s["noise_fraction_of_range"] = cfg.excitation.noise_fraction;
  s["noise_db"] = amplitude_ratio_to_db(cfg.excitation.noise_fraction);
  write_json(dir / "summary.json", s);
}

inline void stage_mcmc(Run& run) {
  const auto& cfg = run.config();
  auto schedule = read_schedule(run);
  const auto observed = Trajectory::read_csv(run.require("simulate/observed.csv"));
  const auto dir = run.stage_dir("mcmc");

  schedule.step_levels.resize(calibration_steps(cfg));
  InferenceProblem p;
  p.experiment = make_experiment(cfg, schedule);
  p.channels = cfg.mcmc.channels;
  p.bound_fraction = cfg.mcmc.bounds_fraction;
  const auto n = p.experiment.grid.size();
  for (const auto& c : p.channels) {
    auto v = observed.channel(c);
    v.resize(n);
    p.data.push_back(std::move(v));
  }
  p.validate();

  const Eigen::VectorXd x0 = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(p.dim()));
  const auto y0 = forward(p, x0);
  if (!y0) throw std::runtime_error("model fails at the nominal parameters");
  const auto sse0 = channel_sse(p.data, *y0);
  std::vector<double> phi0;
  for (std::size_t j = 0; j < sse0.size(); ++j) phi0.push_back(sse0[j] / static_cast<double>(n));

  DramProblem dp{make_target(p), x0, p.lower(), p.upper(),
                 {p.n_data(), phi0, {}, PipelineConfig::beta_convention(cfg.mcmc.beta_convention)}};
  DramConfig dc;
  dc.n_samples = cfg.mcmc.samples;
  dc.burn_in = cfg.mcmc.burn_in;
  dc.initial_cov_scale = cfg.mcmc.initial_cov_scale;
  dc.dr_shrink = cfg.mcmc.dr_shrink;
  dc.adapt_interval = cfg.mcmc.adapt_interval;
  dc.epsilon = cfg.mcmc.epsilon;
  dc.adapt = cfg.mcmc.adapt;
  dc.delayed_rejection = cfg.mcmc.delayed_rejection;
  dc.seed = cfg.seeds.mcmc;
  if (cfg.mcmc.initial_covariance == "laplace")
    dc.initial_cov = 2.4 * 2.4 / static_cast<double>(p.dim()) * laplace_covariance(p, x0, phi0);
  auto chain = run_dram(dp, dc);
  chain.param_names.assign(ReactorParameters::names.begin(), ReactorParameters::names.end());
  chain.channel_names = p.channels;
  io::write_table(dir / "chain.csv", chain.to_table());

  const auto post = chain.post_burn_in();
  const auto stats = chain_stats(post);
  io::Table t;
  t.header = {"parameter", "mean", "median", "std", "geweke_z", "geweke_p", "ess"};
  std::vector<GewekeResult> gw;
  try {
    gw = geweke_columns(post, cfg.mcmc.geweke_first, cfg.mcmc.geweke_last);
  } catch (const std::invalid_argument& e) {
    run.warn(std::string("geweke not computed: ") + e.what());
    gw.assign(stats.size(), GewekeResult{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()});
  }
  for (std::size_t j = 0; j < stats.size(); ++j)
    t.rows.push_back({static_cast<double>(j), stats[j].mean, stats[j].median, stats[j].std, gw[j].z, gw[j].p,
                      effective_sample_size(post.col(static_cast<Eigen::Index>(j)))});
  io::write_table(dir / "parameters.csv", t);

  std::size_t low_p = 0;
  for (const auto& g : gw) low_p += g.p < 0.05;
  if (low_p) run.warn(std::to_string(low_p) + " parameters have Geweke p < 0.05 at this chain length");

  for (const auto& pair : cfg.mcmc.coverage_pairs) {
    auto col = [&](const std::string& name) {
      for (std::size_t j = 0; j < ReactorParameters::size; ++j)
        if (name == ReactorParameters::names[j]) return static_cast<Eigen::Index>(j);
      throw std::invalid_argument("config: unknown parameter " + name);
    };
    Eigen::MatrixX2d xy(post.rows(), 2);
    xy.col(0) = post.col(col(pair[0]));
    xy.col(1) = post.col(col(pair[1]));
    const auto stem = "region_" + pair[0] + "_" + pair[1];
    for (auto [kind, suffix] : {std::pair{RegionKind::gaussian_ellipse, "gaussian"}, std::pair{RegionKind::possolo_hdr, "hdr"}}) {
      try {
        io::write_table(dir / (stem + "_" + suffix + ".csv"), coverage_region(xy, cfg.mcmc.coverage_level, kind).polygon_table());
      } catch (const std::exception& e) {
        run.warn(stem + " " + suffix + ": " + e.what());
      }
    }
  }

  ojson s;
  s["draws"] = chain.size();
  s["burn_in"] = chain.burn_in;
  s["calibration_steps"] = schedule.steps();
  s["acceptance_rate"] = chain.acceptance_rate();
  s["failed_evaluations"] = chain.failed_evaluations;
  s["initial_variance"] = phi0;
  s["initial_covariance"] = cfg.mcmc.initial_covariance;
  std::vector<double> phi_med;
  for (Eigen::Index j = 0; j < chain.phi.cols(); ++j) {
    const Eigen::VectorXd c = chain.phi.col(j).tail(chain.phi.rows() - static_cast<Eigen::Index>(chain.burn_in));
    phi_med.push_back(median(std::vector<double>(c.data(), c.data() + c.size())));
  }
  s["variance_median"] = phi_med;
  s["box_violations"] = (post.array() < 1.0 - p.bound_fraction).count() + (post.array() > 1.0 + p.bound_fraction).count();
  write_json(dir / "summary.json", s);
}

inline void stage_propagate(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto chain = Chain::from_table(io::read_table(run.require("mcmc/chain.csv")), cfg.mcmc.burn_in);
  const auto dir = run.stage_dir("propagate");
  Engine rng = make_stream(cfg.seeds.ensemble, "theta");
  const auto theta = draw_parameter_matrix(chain.post_burn_in(), cfg.ensemble.m, rng);
  auto ds = propagate_ensemble(theta, make_experiment(cfg, schedule), cfg.ensemble.max_failure_fraction);
  split_dataset(ds, cfg.ensemble.fractions, cfg.seeds.split, cfg.ensemble.noise_fraction, cfg.excitation.noise_channels);
  if (!ds.failed_rows.empty()) run.warn(std::to_string(ds.failed_rows.size()) + " ensemble simulations failed");
  write_ensemble(ds, dir / "ensemble");
  std::vector<std::size_t> all(ds.trajectories.front().size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (const auto& target : cfg.targets)
    io::write_table(dir / ("band_" + target + ".csv"),
                    band_table(prediction_band(trajectory_values(ds, target, all), {cfg.validation.level, std::nullopt, 0})));
}

inline void stage_lipschitz(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto data = read_ensemble_data(run, schedule);
  const auto dir = run.stage_dir("lipschitz");
  LipschitzOptions opt;
  opt.p_fraction = cfg.narx.p_fraction;
  opt.max_pairs = cfg.narx.max_pairs;
  opt.pair_seed = cfg.seeds.lipschitz;
  opt.scale_by_sqrt_lags = cfg.narx.scale_by_sqrt_lags;
  ojson sel;
  for (const auto& target : cfg.targets) {
    const auto s = lipschitz_surface(standardized(series_from_trajectory(data.trajectories.front(), target)),
                                     cfg.narx.max_input_lag, cfg.narx.max_output_lag, opt);
    io::write_table(dir / ("surface_" + target + ".csv"), s.to_table());
    const auto pick = select_lags_per_axis(s, cfg.narx.slope_threshold);
    sel[target] = {{"input_lag", pick.input_lag ? ojson(*pick.input_lag) : ojson(nullptr)},
                   {"output_lag", pick.output_lag ? ojson(*pick.output_lag) : ojson(nullptr)}};
    if (!pick.output_lag) run.warn("Lipschitz output axis for " + target + " does not flatten within the grid");
  }
  write_json(dir / "selection.json", sel);
}

inline void stage_tune(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto data = read_ensemble_data(run, schedule);
  std::map<std::string, NarxConfig> narx;
  for (const auto& target : cfg.targets) narx[target] = narx_for(run, target);
  const auto dir = run.stage_dir("tune");
  for (const auto& target : cfg.targets) {
    const auto ds = build_regressors(data.trajectories.front(), target, narx[target], data.schedule, data.split);
    const auto r = hyperband_search(cfg.tuner.space, SearchData::from(ds), cfg.hyperband());
    io::write_file(dir / target / "trials.csv", trial_log_csv(r.trials));
    write_weights(r.best_model, dir / target / "best.weights");
    ojson j;
    j["input_dim"] = r.best.input_dim;
    j["hidden"] = r.best.hidden;
    j["activation"] = to_string(r.best.activations.front());
    j["learning_rate"] = r.best.learning_rate;
    j["architecture"] = r.best.describe();
    j["parameters"] = count_params(r.best);
    j["input_lags"] = narx[target].input_lags;
    j["output_lags"] = narx[target].output_lags;
    j["validation_mse"] = r.best_val_mse;
    j["test_mse"] = r.test_mse;
    j["test_mae"] = r.test_mae;
    j["epochs_spent"] = r.epochs_spent;
    j["trials"] = r.trials.size();
    write_json(dir / target / "best.json", j);
  }
}

inline McTrainConfig mc_config(Run& run, const std::string& target) {
  const auto& cfg = run.config();
  McTrainConfig mc;
  mc.train = cfg.training.train;
  mc.narx = narx_for(run, target);
  mc.members = cfg.training.members;
  mc.seed = cfg.seeds.training;
  mc.max_divergence = cfg.training.max_divergence;
  return mc;
}

inline void stage_mctrain(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto data = read_ensemble_data(run, schedule);
  std::map<std::string, std::pair<MlpSpec, McTrainConfig>> plan;
  for (const auto& target : cfg.targets) plan[target] = {read_best_spec(run, target), mc_config(run, target)};
  const auto dir = run.stage_dir("mctrain");
  for (const auto& target : cfg.targets) {
    const auto e = mc_training(data, plan[target].first, plan[target].second, target);
    if (!e.diverged_rows.empty()) run.warn(std::to_string(e.diverged_rows.size()) + " " + target + " members diverged");
    write_ensemble_model(e, dir / target);
  }
}

inline void stage_datasize(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto data = read_ensemble_data(run, schedule);
  std::map<std::string, std::pair<MlpSpec, McTrainConfig>> plan;
  for (const auto& target : cfg.targets) {
    auto mc = mc_config(run, target);
    mc.seed = cfg.seeds.datasize;
    plan[target] = {read_best_spec(run, target), mc};
  }
  const auto dir = run.stage_dir("datasize");
  ojson j;
  for (const auto& target : cfg.targets) {
    const auto s = data_size_study(data, plan[target].first, plan[target].second, target, cfg.datasize.sizes, cfg.datasize.repeats);
    io::write_table(dir / (target + ".csv"), data_size_table(s));
    j[target] = {{"spearman_rho", s.spearman_rho}, {"sizes", cfg.datasize.sizes}, {"repeats", cfg.datasize.repeats},
                 {"chosen_size", data.size()}};
  }
  write_json(dir / "study.json", j);
}

/// Per-member predictions on each member's own trajectory.
inline MemberPredictions member_predictions(const EnsembleModel& e, const EnsembleDataset& data,
                                            const ValidationSection& v) {
  if (v.mode == "one_step") return one_step_predict(e, data);
  MemberPredictions p;
  std::size_t alive = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto it = std::find(data.rows.begin(), data.rows.end(), e.members[i].row);
    if (it == data.rows.end()) throw std::invalid_argument("no trajectory for member row " + std::to_string(e.members[i].row));
    EnsembleModel one;
    one.target = e.target;
    one.narx = e.narx;
    one.members.push_back(e.members[i]);
    MemberPredictions fr;
    const auto& tr = data.trajectories[static_cast<std::size_t>(it - data.rows.begin())];
    try {
      fr = free_run_simulate(one, tr, {v.divergence_limit});
    } catch (const std::runtime_error&) {
      fr.values.setConstant(1, static_cast<Eigen::Index>(tr.size() - e.narx.max_lag()), std::numeric_limits<double>::quiet_NaN());
      fr.truncated = {true};
      for (std::size_t k = e.narx.max_lag(); k < tr.size(); ++k) fr.times.push_back(tr.times[k]), fr.sample_index.push_back(k);
      fr.rows = {e.members[i].row};
    }
    if (i == 0) {
      p = fr;
      p.values.conservativeResize(static_cast<Eigen::Index>(e.size()), Eigen::NoChange);
    } else {
      p.values.row(static_cast<Eigen::Index>(i)) = fr.values.row(0);
      p.rows.push_back(fr.rows[0]);
      p.truncated.push_back(fr.truncated[0]);
    }
    alive += !fr.truncated[0];
  }
  if (alive == 0) throw std::runtime_error("free_run_simulate: every member diverged");
  return p;
}

inline void stage_validate(Run& run) {
  const auto& cfg = run.config();
  const auto schedule = read_schedule(run);
  const auto data = read_ensemble_data(run, schedule);
  std::map<std::string, EnsembleModel> models;
  for (const auto& target : cfg.targets) models[target] = read_trained(run, target);
  const auto dir = run.stage_dir("validate");
  ojson report;
  bool pass = true;
  for (const auto& target : cfg.targets) {
    const auto& e = models[target];
    const auto all = member_predictions(e, data, cfg.validation);
    const auto test = all.restricted(data.schedule, data.split.test);
    const auto train = all.restricted(data.schedule, data.split.train);
    BandOptions opt{cfg.validation.level, std::nullopt, cfg.seeds.validation};
    ojson t;
    if (cfg.validation.epistemic) {
      const auto [sse, n] = member_residual_sse(train, data, target);
      const auto v = epistemic_variance(sse, n, PipelineConfig::beta_convention(cfg.validation.beta_convention));
      opt.epistemic = v;
      t["epistemic"] = {{"sse", sse}, {"n", n}, {"alpha", v.alpha}, {"beta", v.beta}, {"mean_variance", v.mean()}};
    }
    const auto ai = prediction_band(test, opt);
    const auto phys = prediction_band(trajectory_values(data, target, test.sample_index), {cfg.validation.level, std::nullopt, 0});
    io::write_table(dir / ("band_ai_" + target + ".csv"), band_table(ai));
    io::write_table(dir / ("band_phys_" + target + ".csv"), band_table(phys));
    const auto r = overlap_validate(ai, phys, cfg.validation.threshold);
    const auto s = summarize(e);
    std::size_t truncated = 0;
    for (bool b : all.truncated) truncated += b;
    t["mode"] = cfg.validation.mode;
    t["samples"] = r.samples;
    t["overlapping"] = r.overlapping;
    t["fraction"] = r.fraction;
    t["threshold"] = r.threshold;
    t["pass"] = r.pass;
    t["truncated_members"] = truncated;
    t["median_test_mse"] = s.test_mse.median;
    t["median_test_mae"] = s.test_mae.median;
    report[target] = t;
    pass = pass && r.pass;
  }
  report["pass"] = pass;
  write_json(dir / "report.json", report);
  if (!pass) run.warn("band overlap below threshold");
}

inline void stage_report(Run& run) {
  const auto& cfg = run.config();
  const auto params = io::read_table(run.require("mcmc/parameters.csv"));
  const auto schedule_t = io::read_table(run.require("excite/schedule.csv"));
  const auto corr = io::read_table(run.require("excite/correlation.csv"));
  const auto observed = io::read_table(run.require("simulate/observed.csv"));
  std::map<std::string, ojson> best, summary, study;
  std::map<std::string, io::Table> surface, sizes, ai, phys, hist_mse, hist_epochs;
  const auto study_j = read_json(run.require("datasize/study.json"));
  const auto validation = read_json(run.require("validate/report.json"));
  for (const auto& t : cfg.targets) {
    best[t] = read_json(run.require("tune/" + t + "/best.json"));
    summary[t] = read_json(run.require("mctrain/" + t + "/summary.json"));
    surface[t] = io::read_table(run.require("lipschitz/surface_" + t + ".csv"));
    sizes[t] = io::read_table(run.require("datasize/" + t + ".csv"));
    ai[t] = io::read_table(run.require("validate/band_ai_" + t + ".csv"));
    phys[t] = io::read_table(run.require("validate/band_phys_" + t + ".csv"));
    hist_mse[t] = io::read_table(run.require("mctrain/" + t + "/histogram_test_mse.csv"));
    hist_epochs[t] = io::read_table(run.require("mctrain/" + t + "/histogram_epochs.csv"));
  }
  const auto dir = run.stage_dir("report");

  // Parameter table with names in place of indices.
  std::string t4 = "parameter,mean,median,std,geweke_z,geweke_p,ess\n";
  for (const auto& r : params.rows) {
    t4 += ReactorParameters::names.at(static_cast<std::size_t>(r[0]));
    for (std::size_t c = 1; c < r.size(); ++c) t4 += "," + io::format_double(r[c]);
    t4 += "\n";
  }
  io::write_file(dir / "table_parameters.csv", t4);

  std::string t6 = "target,architecture,layers,activation,learning_rate,input_dim,parameters,validation_mse,test_mse\n";
  for (const auto& t : cfg.targets) {
    const auto& b = best[t];
    t6 += t + "," + b.at("architecture").get<std::string>() + "," + std::to_string(b.at("hidden").size()) + "," +
          b.at("activation").get<std::string>() + "," + io::format_double(b.at("learning_rate").get<double>()) + "," +
          std::to_string(b.at("input_dim").get<std::size_t>()) + "," + std::to_string(b.at("parameters").get<std::size_t>()) +
          "," + io::format_double(b.at("validation_mse").get<double>()) + "," + io::format_double(b.at("test_mse").get<double>()) + "\n";
  }
  io::write_file(dir / "table_architectures.csv", t6);

  std::string t7 = "target,split,metric,min,max,median,std\n";
  for (const auto& t : cfg.targets)
    for (const char* split : {"test", "validation"})
      for (const char* metric : {"mse", "mae"}) {
        const auto& s = summary[t].at("summary").at(split).at(metric);
        t7 += t + "," + split + "," + metric + "," + io::format_double(s.at("min").get<double>()) + "," +
              io::format_double(s.at("max").get<double>()) + "," + io::format_double(s.at("median").get<double>()) + "," +
              io::format_double(s.at("std").get<double>()) + "\n";
      }
  io::write_file(dir / "table_metrics.csv", t7);

  io::write_table(dir / "fig_excitation.csv", schedule_t);
  io::write_table(dir / "fig_input_correlation.csv", corr);
  io::write_table(dir / "fig_observed.csv", observed);
  for (const auto& t : cfg.targets) {
    io::write_table(dir / ("fig_lipschitz_" + t + ".csv"), surface[t]);
    io::write_table(dir / ("fig_datasize_" + t + ".csv"), sizes[t]);
    io::write_table(dir / ("fig_test_mse_histogram_" + t + ".csv"), hist_mse[t]);
    io::write_table(dir / ("fig_epochs_histogram_" + t + ".csv"), hist_epochs[t]);
    io::Table bands;
    bands.header = {"time", "ai_center", "ai_lower", "ai_upper", "phys_center", "phys_lower", "phys_upper"};
    for (std::size_t k = 0; k < ai[t].rows.size(); ++k) {
      const auto& a = ai[t].rows[k];
      const auto& p = phys[t].rows[k];
      bands.rows.push_back({a[0], a[1], a[2], a[3], p[1], p[2], p[3]});
    }
    io::write_table(dir / ("fig_bands_" + t + ".csv"), bands);
  }

  ojson s;
  for (const auto& t : cfg.targets)
    s[t] = {{"architecture", best[t].at("architecture")},
            {"members", summary[t].at("summary").at("members")},
            {"median_test_mse", summary[t].at("summary").at("test").at("mse").at("median")},
            {"overlap_fraction", validation.at(t).at("fraction")},
            {"datasize_spearman_rho", study_j.at(t).at("spearman_rho")}};
  s["validation_pass"] = validation.at("pass");
  write_json(dir / "summary.json", s);
}

// ---------------------------------------------------------------------------
// Dispatch

inline const std::vector<std::pair<std::string, std::function<void(Run&)>>>& stages() {
  static const std::vector<std::pair<std::string, std::function<void(Run&)>>> s = {
      {"excite", stage_excite},       {"simulate", stage_simulate}, {"mcmc", stage_mcmc},
      {"propagate", stage_propagate}, {"lipschitz", stage_lipschitz}, {"tune", stage_tune},
      {"mctrain", stage_mctrain},     {"datasize", stage_datasize}, {"validate", stage_validate},
      {"report", stage_report}};
  return s;
}

/// Runs one stage. The validate stage throws ValidationFailure after its
/// artifacts and manifest entry are written.
inline void run_stage(Run& run, const std::string& name) {
  for (const auto& [stage, fn] : stages()) {
    if (stage != name) continue;
    const auto t0 = std::chrono::steady_clock::now();
    fn(run);
    run.finish(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (stage == "validate" && !read_json(run.path("validate/report.json")).at("pass").get<bool>())
      throw ValidationFailure("band overlap below threshold");
    return;
  }
  throw std::invalid_argument("unknown stage " + name);
}

/// Every stage in order; a validation failure is remembered and reported
/// after the report stage has run.
inline void run_all(Run& run) {
  std::optional<ValidationFailure> failed;
  for (const auto& [stage, fn] : stages()) {
    try {
      run_stage(run, stage);
    } catch (const ValidationFailure& e) {
      failed = e;
    }
  }
  if (failed) throw *failed;
}

}  // namespace uasml
