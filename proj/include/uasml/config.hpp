#pragma once

// Pipeline configuration. A config file is JSON; keys it omits keep their
// defaults and unknown keys are rejected.

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "uasml/dram.hpp"
#include "uasml/io.hpp"
#include "uasml/mlp.hpp"
#include "uasml/narx.hpp"
#include "uasml/reactor.hpp"
#include "uasml/rng.hpp"
#include "uasml/tuner.hpp"

namespace uasml {

struct ReactorSection {
  std::string variant = "physical";  // or as_printed
  ReactorParameters parameters;
  ReactorInputs steady_flows{108.0, 459.0, 378.0, 471.6};
  double rtol = 1e-8;
  double atol = 1e-10;

  ModelVariant model_variant() const {
    if (variant == "physical") return ModelVariant::physical();
    if (variant == "as_printed") return ModelVariant{};
    throw std::invalid_argument("config: reactor.variant must be physical or as_printed");
  }
};

struct ExcitationSection {
  std::size_t steps = 30;
  double hold_hours = 150.0;
  double fraction = 0.15;
  double sample_period_hours = 5.0;
  double noise_fraction = 0.10;
  std::vector<std::string> noise_channels = {"T", "eta"};
  double calibration_fraction = 0.70;  // leading share of steps seen by the MCMC stage
};

struct McmcSection {
  std::size_t samples = 5000;
  std::size_t burn_in = 1000;
  double bounds_fraction = 0.05;
  std::vector<std::string> channels = {"T", "eta"};
  std::string initial_covariance = "laplace";  // or isotropic
  double initial_cov_scale = 0.01;
  double dr_shrink = 0.2;
  std::size_t adapt_interval = 100;
  double epsilon = 1e-10;
  bool adapt = true;
  bool delayed_rejection = true;
  std::string beta_convention = "standard";  // or as_printed
  double geweke_first = 0.1;
  double geweke_last = 0.5;
  double coverage_level = 0.95;
  std::vector<std::array<std::string, 2>> coverage_pairs = {{"Ap", "Ep"}, {"At", "Et"}, {"Ad", "Ed"}};
};

struct EnsembleSection {
  std::size_t m = 200;
  std::array<double, 3> fractions = {0.70, 0.15, 0.15};
  double noise_fraction = 0.0;
  double max_failure_fraction = 0.01;
};

struct NarxSection {
  std::string lags = "fixed";  // or auto (Lipschitz selection)
  std::size_t input_lags = 4;
  std::size_t output_lags = 2;
  bool include_current_input = true;
  std::size_t max_input_lag = 6;
  std::size_t max_output_lag = 6;
  double p_fraction = 0.02;
  std::size_t max_pairs = 200000;
  bool scale_by_sqrt_lags = true;
  double slope_threshold = 0.05;
};

struct TunerSection {
  SearchSpace space;
  std::size_t max_budget = 90;
  std::size_t eta = 3;
  std::size_t brackets = 3;
};

struct TrainingSection {
  TrainConfig train;
  std::size_t members = 0;  // 0 trains one member per trajectory
  double max_divergence = 0.05;
};

struct DataSizeSection {
  std::vector<std::size_t> sizes = {1, 2, 4, 8, 16};
  std::size_t repeats = 3;
};

struct ValidationSection {
  double level = 0.95;
  double threshold = 0.95;
  bool epistemic = true;
  std::string beta_convention = "standard";
  std::string mode = "one_step";  // or free_run
  double divergence_limit = 10.0;
};

struct SeedSection {
  std::uint64_t excitation = 1;
  std::uint64_t noise = 2;
  std::uint64_t mcmc = 3;
  std::uint64_t ensemble = 4;
  std::uint64_t split = 5;
  std::uint64_t lipschitz = 6;
  std::uint64_t tuner = 7;
  std::uint64_t training = 8;
  std::uint64_t datasize = 9;
  std::uint64_t validation = 10;

  /// Replaces every stage seed by one derived from a master seed.
  void derive_from(std::uint64_t master) {
    excitation = derive_seed(master, "excitation");
    noise = derive_seed(master, "noise");
    mcmc = derive_seed(master, "mcmc");
    ensemble = derive_seed(master, "ensemble");
    split = derive_seed(master, "split");
    lipschitz = derive_seed(master, "lipschitz");
    tuner = derive_seed(master, "tuner");
    training = derive_seed(master, "training");
    datasize = derive_seed(master, "datasize");
    validation = derive_seed(master, "validation");
  }
};

struct PipelineConfig {
  int version = 1;
  std::string scale = "desk";
  std::vector<std::string> targets = {"T", "eta"};
  ReactorSection reactor;
  ExcitationSection excitation;
  McmcSection mcmc;
  EnsembleSection ensemble;
  NarxSection narx;
  TunerSection tuner;
  TrainingSection training;
  DataSizeSection datasize;
  ValidationSection validation;
  SeedSection seeds;

  PipelineConfig() {
    tuner.space.min_layers = 2;
    tuner.space.max_layers = 3;
    tuner.space.neurons = {30, 50, 70, 90};
  }

  /// Counts used in the paper; only the sizes change.
  void apply_paper_scale() {
    scale = "paper";
    mcmc.samples = 30000;
    mcmc.burn_in = 5000;
    ensemble.m = 10000;
    tuner.space = SearchSpace{};
    datasize.sizes = {100, 250, 500, 1000, 1750, 2500, 3100};
    datasize.repeats = 25;
  }

  void validate() const {
    if (version != 1) throw std::invalid_argument("config: unsupported version");
    if (targets.empty()) throw std::invalid_argument("config: no targets");
    reactor.model_variant();
    if (excitation.steps < 3) throw std::invalid_argument("config: need at least three excitation steps");
    if (!(excitation.calibration_fraction > 0 && excitation.calibration_fraction <= 1))
      throw std::invalid_argument("config: calibration_fraction must be in (0, 1]");
    if (mcmc.burn_in >= mcmc.samples) throw std::invalid_argument("config: burn_in must be below samples");
    if (mcmc.initial_covariance != "laplace" && mcmc.initial_covariance != "isotropic")
      throw std::invalid_argument("config: mcmc.initial_covariance must be laplace or isotropic");
    beta_convention(mcmc.beta_convention);
    beta_convention(validation.beta_convention);
    if (ensemble.m < 2) throw std::invalid_argument("config: ensemble.m must be at least 2");
    if (narx.lags != "fixed" && narx.lags != "auto") throw std::invalid_argument("config: narx.lags must be fixed or auto");
    if (validation.mode != "one_step" && validation.mode != "free_run")
      throw std::invalid_argument("config: validation.mode must be one_step or free_run");
    tuner.space.validate();
    training.train.validate();
  }

  static BetaConvention beta_convention(const std::string& s) {
    if (s == "standard") return BetaConvention::standard;
    if (s == "as_printed") return BetaConvention::as_printed;
    throw std::invalid_argument("config: beta convention must be standard or as_printed");
  }

  NarxConfig fixed_narx() const {
    NarxConfig c;
    c.input_lags = narx.input_lags;
    c.output_lags = narx.output_lags;
    c.include_current_input = narx.include_current_input;
    return c;
  }

  HyperbandConfig hyperband() const {
    HyperbandConfig h;
    h.max_budget = tuner.max_budget;
    h.eta = tuner.eta;
    h.brackets = tuner.brackets;
    h.seed = seeds.tuner;
    h.train = training.train;
    return h;
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

using ojson = nlohmann::ordered_json;

inline ojson to_json(const PipelineConfig& c) {
  ojson j;
  j["version"] = c.version;
  j["scale"] = c.scale;
  j["targets"] = c.targets;

  ojson params;
  const auto a = c.reactor.parameters.to_array();
  for (std::size_t i = 0; i < ReactorParameters::size; ++i) params[ReactorParameters::names[i]] = a[i];
  ojson flows;
  for (std::size_t i = 0; i < ReactorInputs::size; ++i) flows[ReactorInputs::names[i]] = c.reactor.steady_flows[i];
  j["reactor"] = {{"variant", c.reactor.variant}, {"parameters", params}, {"steady_flows", flows},
                  {"rtol", c.reactor.rtol}, {"atol", c.reactor.atol}};

  const auto& e = c.excitation;
  j["excitation"] = {{"steps", e.steps}, {"hold_hours", e.hold_hours}, {"fraction", e.fraction},
                     {"sample_period_hours", e.sample_period_hours}, {"noise_fraction", e.noise_fraction},
                     {"noise_channels", e.noise_channels}, {"calibration_fraction", e.calibration_fraction}};

  const auto& m = c.mcmc;
  ojson pairs = ojson::array();
  for (const auto& p : m.coverage_pairs) pairs.push_back({p[0], p[1]});
  j["mcmc"] = {{"samples", m.samples}, {"burn_in", m.burn_in}, {"bounds_fraction", m.bounds_fraction},
               {"channels", m.channels}, {"initial_covariance", m.initial_covariance},
               {"initial_cov_scale", m.initial_cov_scale}, {"dr_shrink", m.dr_shrink},
               {"adapt_interval", m.adapt_interval}, {"epsilon", m.epsilon}, {"adapt", m.adapt},
               {"delayed_rejection", m.delayed_rejection}, {"beta_convention", m.beta_convention},
               {"geweke_first", m.geweke_first}, {"geweke_last", m.geweke_last},
               {"coverage_level", m.coverage_level}, {"coverage_pairs", pairs}};

  j["ensemble"] = {{"m", c.ensemble.m}, {"fractions", c.ensemble.fractions},
                   {"noise_fraction", c.ensemble.noise_fraction},
                   {"max_failure_fraction", c.ensemble.max_failure_fraction}};

  const auto& n = c.narx;
  j["narx"] = {{"lags", n.lags}, {"input_lags", n.input_lags}, {"output_lags", n.output_lags},
               {"include_current_input", n.include_current_input}, {"max_input_lag", n.max_input_lag},
               {"max_output_lag", n.max_output_lag}, {"p_fraction", n.p_fraction}, {"max_pairs", n.max_pairs},
               {"scale_by_sqrt_lags", n.scale_by_sqrt_lags}, {"slope_threshold", n.slope_threshold}};

  std::vector<std::string> acts;
  for (auto act : c.tuner.space.activations) acts.push_back(to_string(act));
  j["tuner"] = {{"min_layers", c.tuner.space.min_layers}, {"max_layers", c.tuner.space.max_layers},
                {"neurons", c.tuner.space.neurons}, {"activations", acts},
                {"learning_rates", c.tuner.space.learning_rates}, {"max_budget", c.tuner.max_budget},
                {"eta", c.tuner.eta}, {"brackets", c.tuner.brackets}};

  const auto& t = c.training.train;
  j["training"] = {{"max_epochs", t.max_epochs}, {"patience", t.patience}, {"batch_size", t.batch_size},
                   {"adam_beta1", t.adam.beta1}, {"adam_beta2", t.adam.beta2}, {"adam_epsilon", t.adam.epsilon},
                   {"members", c.training.members}, {"max_divergence", c.training.max_divergence}};

  j["datasize"] = {{"sizes", c.datasize.sizes}, {"repeats", c.datasize.repeats}};

  const auto& v = c.validation;
  j["validation"] = {{"level", v.level}, {"threshold", v.threshold}, {"epistemic", v.epistemic},
                     {"beta_convention", v.beta_convention}, {"mode", v.mode},
                     {"divergence_limit", v.divergence_limit}};

  const auto& s = c.seeds;
  j["seeds"] = {{"excitation", s.excitation}, {"noise", s.noise}, {"mcmc", s.mcmc}, {"ensemble", s.ensemble},
                {"split", s.split}, {"lipschitz", s.lipschitz}, {"tuner", s.tuner}, {"training", s.training},
                {"datasize", s.datasize}, {"validation", s.validation}};
  return j;
}

namespace detail {

/// Throws on any key of `given` absent from `schema`, naming its path.
inline void check_keys(const ojson& schema, const ojson& given, const std::string& path) {
  if (!given.is_object()) return;
  if (!schema.is_object()) throw std::invalid_argument("config: " + path + " is not a section");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const auto where = path.empty() ? it.key() : path + "." + it.key();
    if (!schema.contains(it.key())) throw std::invalid_argument("config: unknown key " + where);
    check_keys(schema.at(it.key()), it.value(), where);
  }
}

}  // namespace detail

inline PipelineConfig config_from_json(const ojson& given) {
  const PipelineConfig defaults;
  ojson j = to_json(defaults);
  detail::check_keys(j, given, "");
  if (given.contains("scale") && given.at("scale") == "paper") {
    PipelineConfig paper;
    paper.apply_paper_scale();
    j = to_json(paper);
  }
  j.merge_patch(given);

  PipelineConfig c;
  try {
    c.version = j.at("version").get<int>();
    c.scale = j.at("scale").get<std::string>();
    c.targets = j.at("targets").get<std::vector<std::string>>();

    const auto& r = j.at("reactor");
    c.reactor.variant = r.at("variant").get<std::string>();
    std::array<double, ReactorParameters::size> a{};
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = r.at("parameters").at(ReactorParameters::names[i]).get<double>();
    c.reactor.parameters = ReactorParameters::from_array(a);
    for (std::size_t i = 0; i < ReactorInputs::size; ++i)
      c.reactor.steady_flows[i] = r.at("steady_flows").at(ReactorInputs::names[i]).get<double>();
    c.reactor.rtol = r.at("rtol").get<double>();
    c.reactor.atol = r.at("atol").get<double>();

    const auto& e = j.at("excitation");
    c.excitation.steps = e.at("steps").get<std::size_t>();
    c.excitation.hold_hours = e.at("hold_hours").get<double>();
    c.excitation.fraction = e.at("fraction").get<double>();
    c.excitation.sample_period_hours = e.at("sample_period_hours").get<double>();
    c.excitation.noise_fraction = e.at("noise_fraction").get<double>();
    c.excitation.noise_channels = e.at("noise_channels").get<std::vector<std::string>>();
    c.excitation.calibration_fraction = e.at("calibration_fraction").get<double>();

    const auto& m = j.at("mcmc");
    c.mcmc.samples = m.at("samples").get<std::size_t>();
    c.mcmc.burn_in = m.at("burn_in").get<std::size_t>();
    c.mcmc.bounds_fraction = m.at("bounds_fraction").get<double>();
    c.mcmc.channels = m.at("channels").get<std::vector<std::string>>();
    c.mcmc.initial_covariance = m.at("initial_covariance").get<std::string>();
    c.mcmc.initial_cov_scale = m.at("initial_cov_scale").get<double>();
    c.mcmc.dr_shrink = m.at("dr_shrink").get<double>();
    c.mcmc.adapt_interval = m.at("adapt_interval").get<std::size_t>();
    c.mcmc.epsilon = m.at("epsilon").get<double>();
    c.mcmc.adapt = m.at("adapt").get<bool>();
    c.mcmc.delayed_rejection = m.at("delayed_rejection").get<bool>();
    c.mcmc.beta_convention = m.at("beta_convention").get<std::string>();
    c.mcmc.geweke_first = m.at("geweke_first").get<double>();
    c.mcmc.geweke_last = m.at("geweke_last").get<double>();
    c.mcmc.coverage_level = m.at("coverage_level").get<double>();
    c.mcmc.coverage_pairs.clear();
    for (const auto& p : m.at("coverage_pairs")) c.mcmc.coverage_pairs.push_back({p.at(0).get<std::string>(), p.at(1).get<std::string>()});

    const auto& en = j.at("ensemble");
    c.ensemble.m = en.at("m").get<std::size_t>();
    c.ensemble.fractions = en.at("fractions").get<std::array<double, 3>>();
    c.ensemble.noise_fraction = en.at("noise_fraction").get<double>();
    c.ensemble.max_failure_fraction = en.at("max_failure_fraction").get<double>();

    const auto& n = j.at("narx");
    c.narx.lags = n.at("lags").get<std::string>();
    c.narx.input_lags = n.at("input_lags").get<std::size_t>();
    c.narx.output_lags = n.at("output_lags").get<std::size_t>();
    c.narx.include_current_input = n.at("include_current_input").get<bool>();
    c.narx.max_input_lag = n.at("max_input_lag").get<std::size_t>();
    c.narx.max_output_lag = n.at("max_output_lag").get<std::size_t>();
    c.narx.p_fraction = n.at("p_fraction").get<double>();
    c.narx.max_pairs = n.at("max_pairs").get<std::size_t>();
    c.narx.scale_by_sqrt_lags = n.at("scale_by_sqrt_lags").get<bool>();
    c.narx.slope_threshold = n.at("slope_threshold").get<double>();

    const auto& t = j.at("tuner");
    c.tuner.space.min_layers = t.at("min_layers").get<std::size_t>();
    c.tuner.space.max_layers = t.at("max_layers").get<std::size_t>();
    c.tuner.space.neurons = t.at("neurons").get<std::vector<std::size_t>>();
    c.tuner.space.activations.clear();
    for (const auto& s : t.at("activations")) c.tuner.space.activations.push_back(activation_from_string(s.get<std::string>()));
    c.tuner.space.learning_rates = t.at("learning_rates").get<std::vector<double>>();
    c.tuner.max_budget = t.at("max_budget").get<std::size_t>();
    c.tuner.eta = t.at("eta").get<std::size_t>();
    c.tuner.brackets = t.at("brackets").get<std::size_t>();

    const auto& tr = j.at("training");
    c.training.train.max_epochs = tr.at("max_epochs").get<std::size_t>();
    c.training.train.patience = tr.at("patience").get<std::size_t>();
    c.training.train.batch_size = tr.at("batch_size").get<std::size_t>();
    c.training.train.adam.beta1 = tr.at("adam_beta1").get<double>();
    c.training.train.adam.beta2 = tr.at("adam_beta2").get<double>();
    c.training.train.adam.epsilon = tr.at("adam_epsilon").get<double>();
    c.training.members = tr.at("members").get<std::size_t>();
    c.training.max_divergence = tr.at("max_divergence").get<double>();

    c.datasize.sizes = j.at("datasize").at("sizes").get<std::vector<std::size_t>>();
    c.datasize.repeats = j.at("datasize").at("repeats").get<std::size_t>();

    const auto& v = j.at("validation");
    c.validation.level = v.at("level").get<double>();
    c.validation.threshold = v.at("threshold").get<double>();
    c.validation.epistemic = v.at("epistemic").get<bool>();
    c.validation.beta_convention = v.at("beta_convention").get<std::string>();
    c.validation.mode = v.at("mode").get<std::string>();
    c.validation.divergence_limit = v.at("divergence_limit").get<double>();

    const auto& s = j.at("seeds");
    c.seeds.excitation = s.at("excitation").get<std::uint64_t>();
    c.seeds.noise = s.at("noise").get<std::uint64_t>();
    c.seeds.mcmc = s.at("mcmc").get<std::uint64_t>();
    c.seeds.ensemble = s.at("ensemble").get<std::uint64_t>();
    c.seeds.split = s.at("split").get<std::uint64_t>();
    c.seeds.lipschitz = s.at("lipschitz").get<std::uint64_t>();
    c.seeds.tuner = s.at("tuner").get<std::uint64_t>();
    c.seeds.training = s.at("training").get<std::uint64_t>();
    c.seeds.datasize = s.at("datasize").get<std::uint64_t>();
    c.seeds.validation = s.at("validation").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& ex) {
    throw std::invalid_argument(std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  ojson j;
  try {
    j = ojson::parse(io::read_file(path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw std::invalid_argument("config " + path.string() + ": " + ex.what());
  }
  return config_from_json(j);
}

inline std::string config_text(const PipelineConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace uasml
