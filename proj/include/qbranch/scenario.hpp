#pragma once

// Scenario runner: binds TOML configs to the automaton, two-slit, Ehrenfest,
// and custom-history-space computations and writes CSV/JSON artifacts plus a
// checksummed manifest. Validation is exhaustive (every error listed, unknown
// keys rejected) and happens before any computation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qbranch/common.hpp"

namespace qbranch::scenario {

struct ValidationResult {
  std::vector<std::string> errors;
  bool ok() const { return errors.empty(); }
};

/// Command-line / environment overrides; they win over config values.
struct Overrides {
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> tol_consistency;
  std::optional<double> tol_branching;
};

struct ArtifactEntry {
  std::string name;       // file name within the output directory
  std::string path;       // full path as written
  std::uint64_t bytes = 0;
  std::string checksum;   // fnv1a64 hex of the file bytes
};

struct Manifest {
  std::string scenario;
  std::string config_path;
  std::string config_checksum;
  std::uint64_t seed = 0;
  std::vector<ArtifactEntry> artifacts;
  /// Expectations that did not hold (tolerance assertions); empty on success.
  /// These are distinguished from crashes: artifacts and the manifest are
  /// still written.
  std::vector<std::string> assertion_failures;
  std::vector<std::string> notes;
};

std::vector<std::pair<std::string, std::string>> known_scenarios();

/// Parse and validate; never computes. Every problem is listed.
ValidationResult validate_config(const std::string& path);

/// Validate, run, write artifacts and manifest.json. Throws ConfigError on
/// invalid configs; assertion failures are reported in the manifest instead.
Manifest run_scenario(const std::string& path, const Overrides& overrides = {});

}  // namespace qbranch::scenario
