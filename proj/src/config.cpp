#include "rsmcert/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"

#include "rsmcert/error.hpp"

namespace rsmcert {

using nlohmann::json;

std::string to_string(PolicyMode mode) { return mode == PolicyMode::fixed ? "fixed" : "learnable"; }

PolicyMode policy_mode_from_string(const std::string& text) {
  if (text == "fixed") return PolicyMode::fixed;
  if (text == "learnable") return PolicyMode::learnable;
  throw ContractViolation("unknown policy mode '" + text + "' (expected fixed or learnable)");
}

namespace {

json box_to_json(const IntervalBox& box) {
  json out = json::array();
  for (Eigen::Index i = 0; i < box.dim(); ++i) out.push_back({box.lower[i], box.upper[i]});
  return out;
}

IntervalBox box_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw ContractViolation("expected a list of [lower, upper] pairs");
  Eigen::VectorXd lo(static_cast<Eigen::Index>(j.size())), hi(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != 2) throw ContractViolation("expected a [lower, upper] pair");
    lo[static_cast<Eigen::Index>(i)] = j[i][0].get<double>();
    hi[static_cast<Eigen::Index>(i)] = j[i][1].get<double>();
  }
  return IntervalBox(lo, hi);
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty())
    throw ContractViolation("expected a non-empty nested list of rows");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != j[0].size()) throw ContractViolation("matrix rows differ in length");
    for (std::size_t c = 0; c < j[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
  }
  return m;
}

struct Field {
  std::function<json(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

template <typename T, typename Member>
Field simple(Member member) {
  return {[member](const ExperimentConfig& c) { return json(member(const_cast<ExperimentConfig&>(c))); },
          [member](ExperimentConfig& c, const json& v) { member(c) = v.get<T>(); }};
}

#define RSM_FIELD(T, expr) simple<T>([](ExperimentConfig& c) -> T& { return expr; })

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"system.state_space",
       {[](const ExperimentConfig& c) { return box_to_json(c.system.state_space); },
        [](ExperimentConfig& c, const json& v) { c.system.state_space = box_from_json(v); }}},
      {"system.safe_set",
       {[](const ExperimentConfig& c) { return box_to_json(c.system.safe_set); },
        [](ExperimentConfig& c, const json& v) { c.system.safe_set = box_from_json(v); }}},
      {"system.A",
       {[](const ExperimentConfig& c) { return matrix_to_json(c.system.dynamics.A); },
        [](ExperimentConfig& c, const json& v) { c.system.dynamics.A = matrix_from_json(v); }}},
      {"system.B",
       {[](const ExperimentConfig& c) { return matrix_to_json(c.system.dynamics.B); },
        [](ExperimentConfig& c, const json& v) { c.system.dynamics.B = matrix_from_json(v); }}},
      {"system.noise",
       {[](const ExperimentConfig& c) { return box_to_json(c.system.noise.support); },
        [](ExperimentConfig& c, const json& v) { c.system.noise.support = box_from_json(v); }}},
      {"system.lipschitz",
       {[](const ExperimentConfig& c) { return json(c.system.dynamics.lipschitz); },
        [](ExperimentConfig& c, const json& v) {
          c.system.dynamics.lipschitz = v.is_null() ? -1.0 : v.get<double>();
        }}},
      {"verifier.tau", RSM_FIELD(double, c.algorithm.learner.tau)},
      {"verifier.cells_per_axis", RSM_FIELD(int, c.algorithm.learner.cells_per_axis)},
      {"verifier.closedness_splits", RSM_FIELD(int, c.algorithm.learner.closedness_splits)},
      {"verifier.max_grid_points", RSM_FIELD(std::size_t, c.algorithm.learner.max_grid_points)},
      {"verifier.threads", RSM_FIELD(int, c.algorithm.learner.threads)},
      {"learner.samples_per_point", RSM_FIELD(int, c.algorithm.learner.samples_per_point)},
      {"learner.lambda", RSM_FIELD(double, c.algorithm.learner.lambda)},
      {"learner.delta", RSM_FIELD(double, c.algorithm.learner.delta)},
      {"learner.epochs_per_call", RSM_FIELD(int, c.algorithm.learner.epochs_per_call)},
      {"learner.pretrain_epochs", RSM_FIELD(int, c.algorithm.learner.pretrain_epochs)},
      {"learner.minibatch_size", RSM_FIELD(int, c.algorithm.learner.minibatch_size)},
      {"learner.differentiate_k", RSM_FIELD(bool, c.algorithm.learner.differentiate_k)},
      {"learner.train_tau_factor", RSM_FIELD(double, c.algorithm.learner.train_tau_factor)},
      {"learner.max_loop_iters", RSM_FIELD(int, c.algorithm.learner.max_loop_iters)},
      {"learner.timeout_seconds", RSM_FIELD(double, c.algorithm.learner.timeout_seconds)},
      {"network.policy_hidden", RSM_FIELD(std::vector<int>, c.algorithm.policy_hidden)},
      {"network.rsm_hidden", RSM_FIELD(std::vector<int>, c.algorithm.learner.rsm_hidden)},
      {"network.value_hidden", RSM_FIELD(std::vector<int>, c.algorithm.ppo.value_hidden)},
      {"network.policy_learning_rate", RSM_FIELD(double, c.algorithm.learner.policy_learning_rate)},
      {"network.rsm_learning_rate", RSM_FIELD(double, c.algorithm.learner.rsm_learning_rate)},
      {"network.value_learning_rate", RSM_FIELD(double, c.algorithm.ppo.value_learning_rate)},
      {"ppo.policy_learning_rate", RSM_FIELD(double, c.algorithm.ppo.policy_learning_rate)},
      {"ppo.episodes_per_iter", RSM_FIELD(int, c.algorithm.ppo.episodes_per_iter)},
      {"ppo.horizon", RSM_FIELD(int, c.algorithm.ppo.horizon)},
      {"ppo.gamma", RSM_FIELD(double, c.algorithm.ppo.gamma)},
      {"ppo.clip_epsilon", RSM_FIELD(double, c.algorithm.ppo.clip_epsilon)},
      {"ppo.std_start", RSM_FIELD(double, c.algorithm.ppo.std_start)},
      {"ppo.std_end", RSM_FIELD(double, c.algorithm.ppo.std_end)},
      {"ppo.std_decay_end_iter", RSM_FIELD(int, c.algorithm.ppo.std_decay_end_iter)},
      {"ppo.policy_epochs", RSM_FIELD(int, c.algorithm.ppo.policy_epochs)},
      {"ppo.policy_epochs_first", RSM_FIELD(int, c.algorithm.ppo.policy_epochs_first)},
      {"ppo.value_epochs", RSM_FIELD(int, c.algorithm.ppo.value_epochs)},
      {"ppo.value_epochs_first", RSM_FIELD(int, c.algorithm.ppo.value_epochs_first)},
      {"ppo.lipschitz_threshold", RSM_FIELD(double, c.algorithm.ppo.policy_lipschitz_threshold)},
      {"ppo.lipschitz_weight", RSM_FIELD(double, c.algorithm.ppo.lipschitz_weight)},
      {"ppo.minibatch_size", RSM_FIELD(int, c.algorithm.ppo.minibatch_size)},
      {"experiment.ppo_iterations", RSM_FIELD(std::vector<int>, c.ppo_iteration_grid)},
      {"experiment.modes",
       {[](const ExperimentConfig& c) {
          json out = json::array();
          for (auto m : c.modes) out.push_back(to_string(m));
          return out;
        },
        [](ExperimentConfig& c, const json& v) {
          c.modes.clear();
          for (const auto& m : v) c.modes.push_back(policy_mode_from_string(m.get<std::string>()));
        }}},
      {"experiment.seeds", RSM_FIELD(std::vector<std::uint64_t>, c.seeds)},
      {"experiment.export_count", RSM_FIELD(int, c.export_count)},
      {"experiment.export_horizon", RSM_FIELD(int, c.export_horizon)},
      {"experiment.output_dir",
       {[](const ExperimentConfig& c) { return json(c.output_dir.string()); },
        [](ExperimentConfig& c, const json& v) { c.output_dir = v.get<std::string>(); }}},
  };
  return table;
}

#undef RSM_FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string literal.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

// Re-derives L_f when it was left unset (or was the default for another A, B).
void finalize_system(ExperimentConfig& cfg, bool lipschitz_given) {
  auto& dyn = cfg.system.dynamics;
  if (!lipschitz_given || dyn.lipschitz <= 0.0) {
    const double bound = affine_lipschitz_bound(dyn.A, dyn.B);
    dyn.lipschitz = bound > 0.0 ? bound : 1.0;
  }
}

}  // namespace

void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value, int line) {
  for (const auto& [name, field] : fields()) {
    if (name != key) continue;
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::parse_error&) {
      // Bare words are accepted as strings (e.g. output_dir = runs).
      parsed = json(trim(value));
    }
    try {
      field.set(cfg, parsed);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("invalid value: ") + e.what(), line, key);
    }
    return;
  }
  throw ConfigError("unknown configuration key", line, key);
}

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& field, const std::string& message) {
    if (!ok) throw ConfigError(message, 0, field);
  };
  try {
    system.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what(), 0, "system");
  }
  try {
    algorithm.learner.validate();
    algorithm.ppo.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what(), 0, "learner/ppo");
  }
  check(!seeds.empty(), "experiment.seeds", "seed list must not be empty");
  check(!modes.empty(), "experiment.modes", "mode list must not be empty");
  check(!ppo_iteration_grid.empty(), "experiment.ppo_iterations", "PPO iteration grid must not be empty");
  for (int it : ppo_iteration_grid) check(it >= 0, "experiment.ppo_iterations", "iteration counts must be >= 0");
  for (int h : algorithm.policy_hidden) check(h > 0, "network.policy_hidden", "widths must be positive");
  for (int h : algorithm.learner.rsm_hidden) check(h > 0, "network.rsm_hidden", "widths must be positive");
  for (int h : algorithm.ppo.value_hidden) check(h > 0, "network.value_hidden", "widths must be positive");
  check(export_count >= 0, "experiment.export_count", "must be non-negative");
  check(export_horizon >= 0, "experiment.export_horizon", "must be non-negative");
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  bool lipschitz_given = false;
  bool dynamics_changed = false;
  std::map<std::string, int> seen;
  while (std::getline(in, raw)) {
    ++line;
    const std::string content = trim(strip_comment(raw));
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line);
    const std::string key = trim(content.substr(0, eq));
    const std::string value = trim(content.substr(eq + 1));
    if (key.empty()) throw ConfigError("missing key", line);
    if (value.empty()) throw ConfigError("missing value", line, key);
    if (auto [it, fresh] = seen.emplace(key, line); !fresh)
      throw ConfigError("duplicate key (first set on line " + std::to_string(it->second) + ")", line, key);
    apply_setting(cfg, key, value, line);
    if (key == "system.lipschitz") lipschitz_given = cfg.system.dynamics.lipschitz > 0.0;
    if (key == "system.A" || key == "system.B") dynamics_changed = true;
  }
  if (dynamics_changed || lipschitz_given) finalize_system(cfg, lipschitz_given);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string render_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  for (const auto& [name, field] : fields()) out << name << " = " << field.get(cfg).dump() << '\n';
  return out.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& entry : fields()) keys.push_back(entry.first);
  return keys;
}

}  // namespace rsmcert
