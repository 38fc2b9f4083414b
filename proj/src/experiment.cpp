#include "rsmcert/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"

#include "rsmcert/error.hpp"

namespace rsmcert {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Everything that influences a run's outcome; the experiment.* keys only choose cells.
std::string run_relevant_config(const ExperimentConfig& cfg) {
  std::istringstream in(render_config(cfg));
  std::string line, out;
  while (std::getline(in, line))
    if (line.rfind("experiment.", 0) != 0) out += line + '\n';
  return out;
}

}  // namespace

std::string record_to_json(const RunRecord& r) {
  json j;
  j["ppo_iters"] = r.ppo_iters;
  j["mode"] = to_string(r.mode);
  j["seed"] = r.seed;
  j["verdict"] = to_string(r.verdict);
  j["loop_iterations"] = r.loop_iterations;
  j["seconds"] = r.seconds;
  j["run_dir"] = r.run_dir.string();
  j["policy_checkpoint"] = r.policy_checkpoint.string();
  j["rsm_checkpoint"] = r.rsm_checkpoint.string();
  j["initial_policy_hash"] = r.initial_policy_hash;
  j["final_policy_hash"] = r.final_policy_hash;
  j["policy_hash_constant"] = r.policy_hash_constant;
  j["message"] = r.message;
  return j.dump(2);
}

RunRecord record_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunRecord r;
  r.ppo_iters = j.at("ppo_iters").get<int>();
  r.mode = policy_mode_from_string(j.at("mode").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.verdict = outcome_from_string(j.at("verdict").get<std::string>());
  r.loop_iterations = j.at("loop_iterations").get<int>();
  r.seconds = j.at("seconds").get<double>();
  r.run_dir = j.at("run_dir").get<std::string>();
  r.policy_checkpoint = j.at("policy_checkpoint").get<std::string>();
  r.rsm_checkpoint = j.at("rsm_checkpoint").get<std::string>();
  r.initial_policy_hash = j.at("initial_policy_hash").get<std::uint64_t>();
  r.final_policy_hash = j.at("final_policy_hash").get<std::uint64_t>();
  r.policy_hash_constant = j.at("policy_hash_constant").get<bool>();
  r.message = j.value("message", "");
  return r;
}

std::string cell_name(int ppo_iters, PolicyMode mode, std::uint64_t seed) {
  return "ppo" + std::to_string(ppo_iters) + "_" + to_string(mode) + "_seed" + std::to_string(seed);
}

std::string summary_table(const std::vector<RunRecord>& records, const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << std::left << std::setw(10) << "ppo_iters";
  for (auto m : cfg.modes) out << " | " << std::setw(9) << to_string(m);
  out << '\n' << std::string(10, '-');
  for (std::size_t i = 0; i < cfg.modes.size(); ++i) out << "-+-" << std::string(9, '-');
  out << '\n';
  for (int iters : cfg.ppo_iteration_grid) {
    out << std::setw(10) << iters;
    for (auto m : cfg.modes) {
      int stable = 0, total = 0;
      for (const auto& r : records) {
        if (r.ppo_iters != iters || r.mode != m) continue;
        ++total;
        if (r.verdict == Outcome::stable) ++stable;
      }
      out << " | " << std::setw(9) << (std::to_string(stable) + "/" + std::to_string(total));
    }
    out << '\n';
  }
  return out.str();
}

std::vector<MlpNetwork> pretrained_policies(const ExperimentConfig& cfg, std::uint64_t seed,
                                            const std::vector<int>& wanted, std::vector<PpoIterationLog>* log) {
  require(!wanted.empty(), "no pre-training budgets requested");
  for (int w : wanted) require(w >= 0, "pre-training budgets must be non-negative");
  AlgorithmConfig algo = cfg.algorithm;
  algo.ppo_iterations = *std::max_element(wanted.begin(), wanted.end());
  std::vector<MlpNetwork> out(wanted.size());
  const MlpNetwork initial = initial_policy(cfg.system, algo.policy_hidden, seed);
  for (std::size_t i = 0; i < wanted.size(); ++i)
    if (wanted[i] == 0) out[i] = initial;
  PretrainResult pre = pretrain_policy(cfg.system, algo, seed, [&](int it, const MlpNetwork& p) {
    for (std::size_t i = 0; i < wanted.size(); ++i)
      if (wanted[i] == it) out[i] = p;
  });
  if (log) *log = std::move(pre.log);
  return out;
}

MatrixResult run_matrix(const ExperimentConfig& cfg, const fs::path& root, const ProgressSink& progress) {
  cfg.validate();
  auto say = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  fs::create_directories(root / "policies");

  const fs::path stamp = root / "config.txt";
  const std::string relevant = run_relevant_config(cfg);
  if (fs::exists(stamp)) {
    if (read_text(stamp) != relevant)
      throw ConfigError("output directory " + root.string() + " holds results of a different configuration");
  } else {
    write_atomic(stamp, relevant);
  }

  MatrixResult result;
  for (std::uint64_t seed : cfg.seeds) {
    // Pre-trained policies are shared by both modes and cached on disk.
    std::map<int, MlpNetwork> policies;
    auto policy_path = [&](int iters) {
      return root / "policies" / ("seed" + std::to_string(seed) + "_ppo" + std::to_string(iters) + ".net");
    };
    auto ensure_policies = [&] {
      if (!policies.empty()) return;
      std::vector<int> missing;
      for (int iters : cfg.ppo_iteration_grid) {
        if (fs::exists(policy_path(iters)))
          policies.emplace(iters, load_network(policy_path(iters)));
        else
          missing.push_back(iters);
      }
      if (missing.empty()) return;
      say("seed " + std::to_string(seed) + ": PPO pre-training to " +
          std::to_string(*std::max_element(missing.begin(), missing.end())) + " iterations");
      std::vector<PpoIterationLog> log;
      std::vector<MlpNetwork> nets = pretrained_policies(cfg, seed, missing, &log);
      for (std::size_t i = 0; i < missing.size(); ++i) {
        save_network(nets[i], policy_path(missing[i]));
        policies.emplace(missing[i], std::move(nets[i]));
      }
      if (!log.empty())
        write_atomic(root / "policies" / ("seed" + std::to_string(seed) + "_ppo_curve.csv"), training_curve_csv(log));
    };

    for (int iters : cfg.ppo_iteration_grid) {
      for (PolicyMode mode : cfg.modes) {
        const fs::path dir = root / cell_name(iters, mode, seed);
        const fs::path record_file = dir / "record.json";
        if (fs::exists(record_file)) {
          result.records.push_back(record_from_json(read_text(record_file)));
          continue;
        }
        ensure_policies();
        say("running " + cell_name(iters, mode, seed));
        fs::create_directories(dir);
        save_network(policies.at(iters), dir / "policy_pretrained.net");
        LearnerConfig lc = cfg.algorithm.learner;
        lc.policy_trainable = mode == PolicyMode::learnable;
        if (progress) lc.progress = [&](const std::string& line) { progress("  " + line); };
        RunVerdict v = learn_certificate(cfg.system, policies.at(iters), lc, seed, dir);

        RunRecord r;
        r.ppo_iters = iters;
        r.mode = mode;
        r.seed = seed;
        r.verdict = v.outcome;
        r.loop_iterations = v.iterations;
        r.seconds = v.seconds;
        r.run_dir = dir;
        r.policy_checkpoint = dir / "policy.net";
        r.rsm_checkpoint = dir / "rsm.net";
        r.initial_policy_hash = v.initial_policy_hash;
        r.final_policy_hash = v.policy.parameter_hash();
        r.policy_hash_constant = r.final_policy_hash == r.initial_policy_hash &&
                                 std::all_of(v.policy_hashes.begin(), v.policy_hashes.end(),
                                             [&](std::uint64_t h) { return h == r.initial_policy_hash; });
        r.message = v.message;
        write_atomic(record_file, record_to_json(r));
        say("  " + to_string(r.verdict) + " after " + std::to_string(r.loop_iterations) + " verifier calls, " +
            std::to_string(r.seconds) + " s");
        result.records.push_back(std::move(r));
        ++result.executed;
      }
    }
  }

  // Records in grid order regardless of the seed-major execution order.
  std::vector<RunRecord> ordered;
  for (int iters : cfg.ppo_iteration_grid)
    for (PolicyMode mode : cfg.modes)
      for (const auto& r : result.records)
        if (r.ppo_iters == iters && r.mode == mode) ordered.push_back(r);
  result.records = std::move(ordered);

  result.summary = summary_table(result.records, cfg);
  write_atomic(root / "summary.txt", result.summary);
  std::string lines;
  for (const auto& r : result.records) lines += json::parse(record_to_json(r)).dump() + '\n';
  write_atomic(root / "records.jsonl", lines);
  return result;
}

std::string export_trajectories(const SystemSpec& sys, const MlpNetwork& policy, int count, int horizon,
                                std::uint64_t seed) {
  require(count >= 0 && horizon >= 0, "count and horizon must be non-negative");
  require(policy.input_dim() == sys.state_dim() && policy.output_dim() == sys.action_dim(),
          "policy does not match the system dimensions");
  std::ostringstream out;
  out.precision(17);
  out << "trajectory,t";
  for (int d = 0; d < sys.state_dim(); ++d) out << ",x" << d;
  out << ",terminal\n";
  for (int k = 0; k < count; ++k) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
    const Eigen::VectorXd x0 = sys.sample_state(rng);
    const Trajectory traj = rollout(sys, policy, x0, horizon, 0.0, mix_seed(seed, 0x100000000ULL + k));
    for (std::size_t t = 0; t < traj.states.size(); ++t) {
      out << k << ',' << t;
      for (Eigen::Index d = 0; d < traj.states[t].size(); ++d) out << ',' << traj.states[t][d];
      out << ',' << (t + 1 == traj.states.size() ? 1 : 0) << '\n';
    }
  }
  return out.str();
}

std::string plot_script(const std::string& csv_name) {
  std::ostringstream out;
  out << "# Plots trajectories exported by `rsmcert export-traj`. Requires pandas and matplotlib.\n"
      << "import sys\n\n"
      << "import matplotlib.pyplot as plt\n"
      << "import pandas as pd\n\n"
      << "path = sys.argv[1] if len(sys.argv) > 1 else \"" << csv_name << "\"\n"
      << "df = pd.read_csv(path)\n"
      << "fig, ax = plt.subplots(figsize=(5, 5))\n"
      << "for _, traj in df.groupby(\"trajectory\"):\n"
      << "    ax.plot(traj.x0, traj.x1, lw=0.8, alpha=0.7)\n"
      << "end = df[df.terminal == 1]\n"
      << "ax.scatter(end.x0, end.x1, s=12, c=\"k\", zorder=3, label=\"terminal state\")\n"
      << "ax.set_xlabel(\"x0\")\n"
      << "ax.set_ylabel(\"x1\")\n"
      << "ax.legend()\n"
      << "fig.savefig(path.rsplit(\".\", 1)[0] + \".png\", dpi=150, bbox_inches=\"tight\")\n";
  return out.str();
}

VerifyResult verify_only(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                         const LearnerConfig& cfg) {
  sys.validate();
  require(policy.input_dim() == sys.state_dim() && policy.output_dim() == sys.action_dim(),
          "policy does not match the system dimensions");
  require(rsm.input_dim() == sys.state_dim() && rsm.output_dim() == 1, "certificate network has the wrong shape");
  VerifyResult out;
  out.closedness = check_closed_under_dynamics(sys, policy, cfg.closedness_splits);
  const Discretization disc = build_discretization(sys.state_space, sys.safe_set, cfg.tau, cfg.max_grid_points);
  out.report = check_all(sys, policy, rsm, disc, {cfg.cells_per_axis, cfg.threads});
  if (!out.closedness.closed)
    out.exit_code = 2;
  else
    out.exit_code = out.report.certified ? 0 : 1;
  return out;
}

std::string format_verify_result(const VerifyResult& result) {
  json j;
  j["exit_code"] = result.exit_code;
  j["closed"] = result.closedness.closed;
  if (!result.closedness.closed && result.closedness.source && result.closedness.witness) {
    auto box = [](const IntervalBox& b) {
      json out = json::array();
      for (Eigen::Index i = 0; i < b.dim(); ++i) out.push_back({b.lower[i], b.upper[i]});
      return out;
    };
    j["closedness_source"] = box(*result.closedness.source);
    j["closedness_image"] = box(*result.closedness.witness);
  }
  j["report"] = json::parse(format_report(result.report));
  return j.dump(2);
}

}  // namespace rsmcert
