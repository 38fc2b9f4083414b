#pragma once

// Experiment-level operations behind the command line: the pre-training x mode x seed
// matrix, trajectory export and stand-alone verification of saved checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rsmcert/config.hpp"
#include "rsmcert/learner.hpp"

namespace rsmcert {

struct RunRecord {
  int ppo_iters = 0;
  PolicyMode mode = PolicyMode::fixed;
  std::uint64_t seed = 0;
  Outcome verdict = Outcome::unknown;
  int loop_iterations = 0;
  double seconds = 0.0;
  std::filesystem::path run_dir;
  std::filesystem::path policy_checkpoint;
  std::filesystem::path rsm_checkpoint;
  std::uint64_t initial_policy_hash = 0;
  std::uint64_t final_policy_hash = 0;
  bool policy_hash_constant = true;  // over every loop iteration of the run
  std::string message;
};

std::string record_to_json(const RunRecord& record);
RunRecord record_from_json(const std::string& text);

/// Directory name of one matrix cell, e.g. "ppo50_fixed_seed3".
std::string cell_name(int ppo_iters, PolicyMode mode, std::uint64_t seed);

struct MatrixResult {
  std::vector<RunRecord> records;  // grid order: ppo_iters, mode, seed
  std::string summary;
  int executed = 0;  // cells actually run (the rest were loaded from their records)
};

/// Rows are pre-training iterations, columns are modes, entries "k/n" with k the
/// number of stable records.
std::string summary_table(const std::vector<RunRecord>& records, const ExperimentConfig& cfg);

using ProgressSink = std::function<void(const std::string&)>;

/// Policy after `iters` PPO iterations for `seed`, exactly as run_algorithm produces it.
/// Snapshots of every iteration count in `wanted` are returned from a single PPO run.
std::vector<MlpNetwork> pretrained_policies(const ExperimentConfig& cfg, std::uint64_t seed,
                                            const std::vector<int>& wanted, std::vector<PpoIterationLog>* log = nullptr);

/// Runs every missing cell under `root` and (re)writes summary.txt and records.jsonl.
/// Cells whose record.json exists are loaded, not recomputed.
MatrixResult run_matrix(const ExperimentConfig& cfg, const std::filesystem::path& root,
                        const ProgressSink& progress = {});

/// `count` rollouts without exploration noise. Rows: trajectory, t, state components,
/// terminal (1 on the last row of each trajectory).
std::string export_trajectories(const SystemSpec& sys, const MlpNetwork& policy, int count, int horizon,
                                std::uint64_t seed);

/// Small matplotlib script that plots a CSV produced by export_trajectories.
std::string plot_script(const std::string& csv_name);

struct VerifyResult {
  int exit_code = 1;  // 0 certified, 1 not certified, 2 closedness precondition failed
  ClosednessResult closedness;
  VerifierReport report;
};

/// Closedness check followed by one check_all. The decrease check also runs when the
/// precondition fails, so the report lists counterexamples either way.
VerifyResult verify_only(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                         const LearnerConfig& cfg);

std::string format_verify_result(const VerifyResult& result);

}  // namespace rsmcert
