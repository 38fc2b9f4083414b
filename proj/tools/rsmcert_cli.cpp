#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "rsmcert/config.hpp"
#include "rsmcert/error.hpp"
#include "rsmcert/experiment.hpp"
#include "rsmcert/learner.hpp"

namespace fs = std::filesystem;
using namespace rsmcert;

namespace {

constexpr const char* kOutputRootEnv = "RSMCERT_OUTPUT_ROOT";

// Relative output paths are placed under $RSMCERT_OUTPUT_ROOT when it is set.
fs::path output_path(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<double> tau;
  std::optional<int> cells;
  std::optional<int> threads;
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "experiment configuration file (defaults when omitted)");
    app->add_option("--set", overrides, "override a configuration key, e.g. --set verifier.tau=0.01");
    app->add_option("--tau", tau, "grid mesh (verifier.tau)");
    app->add_option("--cells-per-axis", cells, "noise cells per axis of the expectation bound");
    app->add_option("--threads", threads, "verifier worker threads (0: all cores)");
    app->add_flag("-q,--quiet", quiet, "suppress progress output");
  }

  ExperimentConfig load() const {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    std::string text = config_path.empty() ? std::string() : [&] {
      std::ifstream in(config_path);
      std::ostringstream buf;
      buf << in.rdbuf();
      return buf.str();
    }();
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      text += "\n" + o.substr(0, eq) + " = " + o.substr(eq + 1);
    }
    if (tau) text += "\nverifier.tau = " + std::to_string(*tau);
    if (cells) text += "\nverifier.cells_per_axis = " + std::to_string(*cells);
    if (threads) text += "\nverifier.threads = " + std::to_string(*threads);
    if (!overrides.empty() || tau || cells || threads) cfg = parse_overridden(text);
    return cfg;
  }

  ProgressSink sink() const {
    if (quiet) return {};
    return [](const std::string& line) { std::cerr << line << std::endl; };
  }

 private:
  // Later lines win: drop earlier assignments of a key before parsing.
  static ExperimentConfig parse_overridden(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    std::vector<std::string> kept;
    std::vector<std::string> seen;
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
      const auto hash = it->find('#');
      const std::string body = hash == std::string::npos ? *it : it->substr(0, hash);
      const auto eq = body.find('=');
      if (eq != std::string::npos) {
        std::string key = body.substr(0, eq);
        key.erase(0, key.find_first_not_of(" \t"));
        key.erase(key.find_last_not_of(" \t") + 1);
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
        seen.push_back(key);
      }
      kept.push_back(*it);
    }
    std::string merged;
    for (auto it = kept.rbegin(); it != kept.rend(); ++it) merged += *it + '\n';
    return parse_config(merged);
  }
};

int exit_code(Outcome o) {
  switch (o) {
    case Outcome::stable: return 0;
    case Outcome::unknown: return 1;
    case Outcome::precondition_failed: return 2;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learn and verify ranking-supermartingale stability certificates for neural policies"};
  app.require_subcommand(1);
  int result = 0;

  // pretrain
  Common pre_common;
  std::uint64_t pre_seed = 0;
  std::optional<int> pre_iters;
  std::string pre_out = "pretrain";
  auto* pre = app.add_subcommand("pretrain", "PPO pre-training of a policy");
  pre_common.attach(pre);
  pre->add_option("--seed", pre_seed, "random seed");
  pre->add_option("--iters", pre_iters, "PPO iterations (default: 50)");
  pre->add_option("-o,--out", pre_out, "output directory");
  pre->callback([&] {
    ExperimentConfig cfg = pre_common.load();
    AlgorithmConfig algo = cfg.algorithm;
    if (pre_iters) algo.ppo_iterations = *pre_iters;
    auto sink = pre_common.sink();
    PretrainResult res = pretrain_policy(cfg.system, algo, pre_seed, [&](int it, const MlpNetwork&) {
      if (sink && (it % 10 == 0 || it == algo.ppo_iterations)) sink("PPO iteration " + std::to_string(it));
    });
    const fs::path dir = output_path(pre_out);
    fs::create_directories(dir);
    save_network(res.policy, dir / "policy.net");
    write_file(dir / "ppo_curve.csv", training_curve_csv(res.log));
    const auto closed = check_closed_under_dynamics(cfg.system, res.policy, cfg.algorithm.learner.closedness_splits);
    std::cout << "policy written to " << (dir / "policy.net").string() << "\n"
              << "safe set closed under the pre-trained policy: " << (closed.closed ? "yes" : "no") << "\n";
    result = 0;
  });

  // learn
  Common learn_common;
  std::uint64_t learn_seed = 0;
  std::string learn_mode = "fixed";
  std::optional<int> learn_ppo;
  std::string learn_policy;
  std::string learn_out = "learn";
  auto* learn = app.add_subcommand("learn", "PPO pre-training followed by the learner-verifier loop");
  learn_common.attach(learn);
  learn->add_option("--seed", learn_seed, "random seed");
  learn->add_option("--mode", learn_mode, "policy mode during certificate learning")
      ->check(CLI::IsMember({"fixed", "learnable"}));
  learn->add_option("--ppo-iters", learn_ppo, "PPO iterations before learning (default: 50)");
  learn->add_option("--policy", learn_policy, "start from this policy checkpoint instead of PPO")
      ->check(CLI::ExistingFile);
  learn->add_option("-o,--out", learn_out, "run directory");
  learn->callback([&] {
    ExperimentConfig cfg = learn_common.load();
    LearnerConfig lc = cfg.algorithm.learner;
    lc.policy_trainable = policy_mode_from_string(learn_mode) == PolicyMode::learnable;
    lc.progress = learn_common.sink();
    const fs::path dir = output_path(learn_out);
    fs::create_directories(dir);
    MlpNetwork policy;
    if (!learn_policy.empty()) {
      policy = load_network(learn_policy);
    } else {
      AlgorithmConfig algo = cfg.algorithm;
      if (learn_ppo) algo.ppo_iterations = *learn_ppo;
      PretrainResult pre_res = pretrain_policy(cfg.system, algo, learn_seed);
      write_file(dir / "ppo_curve.csv", training_curve_csv(pre_res.log));
      policy = std::move(pre_res.policy);
    }
    save_network(policy, dir / "policy_pretrained.net");
    RunVerdict v = learn_certificate(cfg.system, std::move(policy), lc, learn_seed, dir);
    std::cout << format_verdict(v) << "\n";
    result = exit_code(v.outcome);
  });

  // verify
  Common ver_common;
  std::string ver_policy, ver_rsm, ver_report;
  auto* ver = app.add_subcommand("verify", "closedness check and one verifier call on saved checkpoints");
  ver_common.attach(ver);
  ver->add_option("--policy", ver_policy, "policy checkpoint")->required()->check(CLI::ExistingFile);
  ver->add_option("--rsm", ver_rsm, "certificate checkpoint")->required()->check(CLI::ExistingFile);
  ver->add_option("--report", ver_report, "also write the report to this file");
  ver->callback([&] {
    ExperimentConfig cfg = ver_common.load();
    const VerifyResult r = verify_only(cfg.system, load_network(ver_policy), load_network(ver_rsm), cfg.algorithm.learner);
    const std::string text = format_verify_result(r);
    std::cout << text << "\n";
    if (!ver_report.empty()) write_file(output_path(ver_report), text);
    result = r.exit_code;
  });

  // matrix
  Common mat_common;
  std::string mat_out;
  auto* mat = app.add_subcommand("matrix", "pre-training budget x policy mode x seed experiment (resumable)");
  mat_common.attach(mat);
  mat->add_option("-o,--out", mat_out, "output directory (default: experiment.output_dir)");
  mat->callback([&] {
    ExperimentConfig cfg = mat_common.load();
    const fs::path dir = output_path(mat_out.empty() ? cfg.output_dir : fs::path(mat_out));
    MatrixResult m = run_matrix(cfg, dir, mat_common.sink());
    std::cout << m.summary;
    result = 0;
  });

  // export-traj
  Common exp_common;
  std::string exp_policy, exp_out = "trajectories.csv";
  std::optional<int> exp_count, exp_horizon;
  std::uint64_t exp_seed = 0;
  auto* exp = app.add_subcommand("export-traj", "roll out a policy checkpoint and write the trajectories as CSV");
  exp_common.attach(exp);
  exp->add_option("--policy", exp_policy, "policy checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--count", exp_count, "number of trajectories (default: experiment.export_count)");
  exp->add_option("--horizon", exp_horizon, "steps per trajectory (default: experiment.export_horizon)");
  exp->add_option("--seed", exp_seed, "random seed for initial states and disturbances");
  exp->add_option("-o,--out", exp_out, "CSV file");
  exp->callback([&] {
    ExperimentConfig cfg = exp_common.load();
    const fs::path csv = output_path(exp_out);
    write_file(csv, export_trajectories(cfg.system, load_network(exp_policy), exp_count.value_or(cfg.export_count),
                                        exp_horizon.value_or(cfg.export_horizon), exp_seed));
    const fs::path script = csv.parent_path() / "plot_trajectories.py";
    write_file(script, plot_script(csv.filename().string()));
    std::cout << "wrote " << csv.string() << " and " << script.string() << "\n";
    result = 0;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return result;
}
