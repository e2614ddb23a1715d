#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "qbranch/scenario.hpp"

namespace {

// exit codes: 0 ok, 1 crash, 2 invalid config, 3 failed tolerance assertion
constexpr int kOk = 0;
constexpr int kCrash = 1;
constexpr int kConfig = 2;
constexpr int kAssertion = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qbranch: scenario runner for branching-structure computations"};
  app.require_subcommand(1);

  std::string config_path;
  qbranch::scenario::Overrides overrides;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> tol_consistency, tol_branching;

  auto* validate = app.add_subcommand("validate", "validate a scenario config");
  validate->add_option("path", config_path, "TOML scenario config")->required();

  auto* run = app.add_subcommand("run", "run a scenario and write artifacts");
  run->add_option("path", config_path, "TOML scenario config")->required();
  run->add_option("--out", out_dir, "output directory (overrides the config)")
      ->envname("QBRANCH_OUT");
  run->add_option("--seed", seed, "seed for randomized scenarios")
      ->envname("QBRANCH_SEED");
  run->add_option("--tol-consistency", tol_consistency,
                  "consistency tolerance override")
      ->envname("QBRANCH_TOL_CONSISTENCY");
  run->add_option("--tol-branching", tol_branching, "branching tolerance override")
      ->envname("QBRANCH_TOL_BRANCHING");

  auto* list = app.add_subcommand("list-scenarios", "list available scenarios");

  CLI11_PARSE(app, argc, argv);

  try {
    if (list->parsed()) {
      for (const auto& [name, description] : qbranch::scenario::known_scenarios())
        std::cout << name << "\n    " << description << "\n";
      return kOk;
    }
    if (validate->parsed()) {
      auto result = qbranch::scenario::validate_config(config_path);
      if (result.ok()) {
        std::cout << "ok\n";
        return kOk;
      }
      for (const auto& e : result.errors) std::cout << "error: " << e << "\n";
      return kConfig;
    }
    // run
    overrides.output_dir = out_dir;
    overrides.seed = seed;
    overrides.tol_consistency = tol_consistency;
    overrides.tol_branching = tol_branching;
    auto manifest = qbranch::scenario::run_scenario(config_path, overrides);
    for (const auto& a : manifest.artifacts)
      std::cout << "wrote " << a.path << " (" << a.bytes << " bytes, fnv1a64 "
                << a.checksum << ")\n";
    if (!manifest.assertion_failures.empty()) {
      for (const auto& f : manifest.assertion_failures)
        std::cout << "assertion failed: " << f << "\n";
      return kAssertion;
    }
    std::cout << "ok\n";
    return kOk;
  } catch (const qbranch::ConfigError& e) {
    std::cout << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return kCrash;
  }
}
