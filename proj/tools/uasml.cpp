// uasml: stage runner for the reactor calibration / surrogate UQ workflow.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "uasml/pipeline.hpp"

namespace {

uasml::PipelineConfig resolve_config(const std::string& path, const std::string& scale, std::optional<std::uint64_t> seed) {
  uasml::ojson j = uasml::ojson::object();
  if (!path.empty()) {
    try {
      j = uasml::ojson::parse(uasml::io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument("config " + path + ": " + e.what());
    }
  }
  if (!scale.empty()) j["scale"] = scale;
  auto cfg = uasml::config_from_json(j);
  if (seed) cfg.seeds.derive_from(*seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uasml: calibrate, propagate, train and validate reactor surrogates"};
  app.require_subcommand(1, 1);

  std::string config_path, out = "run", scale;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config; unspecified keys take defaults")->check(CLI::ExistingFile);
  app.add_option("--out", out, "run directory")->capture_default_str();
  app.add_option("--seed", seed, "master seed; derives every stage seed");
  app.add_option("--scale", scale, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app.fallthrough();

  std::vector<std::string> commands;
  for (const auto& [name, fn] : uasml::stages()) {
    app.add_subcommand(name, "run the " + name + " stage");
    commands.push_back(name);
  }
  app.add_subcommand("all", "run every stage in order");
  app.add_subcommand("config", "print the resolved config");
  app.add_subcommand("audit", "recheck every artifact digest in the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    const auto cfg = resolve_config(config_path, scale, seed);
    if (cmd == "config") {
      std::cout << uasml::config_text(cfg);
      return 0;
    }
    uasml::RunLock lock(out);
    uasml::Run run(out, cfg);
    if (cmd == "audit") {
      const auto bad = run.audit();
      for (const auto& b : bad) std::cerr << "modified or missing: " << b << "\n";
      return bad.empty() ? 0 : 3;
    }
    if (cmd == "all")
      uasml::run_all(run);
    else
      uasml::run_stage(run, cmd);
    return 0;
  } catch (const uasml::ValidationFailure& e) {
    std::cerr << "validation failed: " << e.what() << "\n";
    return 2;
  } catch (const uasml::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
