#pragma once

// Flat experiment configuration: one `dotted.key = value` per line, values are JSON
// literals, `#` starts a comment. Every key has a default, so an empty file is a
// valid configuration.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rsmcert/learner.hpp"
#include "rsmcert/system.hpp"

namespace rsmcert {

enum class PolicyMode { fixed, learnable };
std::string to_string(PolicyMode mode);
PolicyMode policy_mode_from_string(const std::string& text);

struct ExperimentConfig {
  SystemSpec system = default_benchmark();
  AlgorithmConfig algorithm;
  std::vector<int> ppo_iteration_grid = {0, 20, 30, 40, 50};
  std::vector<PolicyMode> modes = {PolicyMode::fixed, PolicyMode::learnable};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  int export_count = 20;
  int export_horizon = 200;
  std::filesystem::path output_dir = "runs";

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Applies one `key = value` assignment. `line` is used for diagnostics only.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value, int line = 0);

/// Parses a whole configuration text on top of the defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical text form; parse_config(render_config(c)) reproduces c.
std::string render_config(const ExperimentConfig& cfg);

/// All recognised keys, in rendering order.
std::vector<std::string> config_keys();

}  // namespace rsmcert
