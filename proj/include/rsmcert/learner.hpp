#pragma once

// Joint training of the policy and the ranking-supermartingale candidate against
//   L = L_RSM + lambda * L_Lipschitz
// and the learner-verifier loop around it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsmcert/nn.hpp"
#include "rsmcert/optimizer.hpp"
#include "rsmcert/ppo.hpp"
#include "rsmcert/system.hpp"
#include "rsmcert/verifier.hpp"

namespace rsmcert {

struct LearnerConfig {
  double tau = 0.02;
  int samples_per_point = 16;  // N
  double lambda = 1e-3;
  double delta = 8.0;          // Lipschitz threshold on tau * K
  int epochs_per_call = 50;
  int pretrain_epochs = 50;
  int minibatch_size = 256;
  double rsm_learning_rate = 5e-4;
  double policy_learning_rate = 5e-5;
  std::vector<int> rsm_hidden = {128, 128};
  bool policy_trainable = false;
  int max_loop_iters = 50;
  double timeout_seconds = 1800.0;
  int cells_per_axis = 8;
  int closedness_splits = 16;
  std::size_t max_grid_points = 100000;
  int threads = 0;
  /// When false, K enters the hinge as a constant and only the Lipschitz term acts on
  /// L_V; when true the hinge is differentiated through K as well.
  bool differentiate_k = true;
  /// The learner trains against tau * train_tau_factor; the verifier always uses tau.
  double train_tau_factor = 1.0;
  /// Optional one-line status messages from the loop (not part of the configuration).
  std::function<void(const std::string&)> progress;

  void validate() const;
};

struct LossBreakdown {
  double rsm_loss = 0.0;
  double lipschitz_loss = 0.0;
  double total = 0.0;
  double lambda = 0.0;
};

/// (1/k) sum_i max(mean_successor_values_i - values_i + tau_k, 0).
double rsm_hinge_loss(const Eigen::VectorXd& mean_successor_values, const Eigen::VectorXd& values, double tau_k);

/// L_RSM over the whole discretization; successors are f(x, policy(x), w) for the
/// stored disturbances w. Points without samples contribute 0 but count in |X~|.
double rsm_loss(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm, const Discretization& disc,
                const SuccessorStore& store, double tau, double K);

/// max(L_V - delta / (tau (L_f (L_pi + 1) + 1)), 0).
double lipschitz_loss(const MlpNetwork& policy, const MlpNetwork& rsm, double tau, double lipschitz_f, double delta);

/// Total loss over the grid points `indices` and its gradient. K is computed from the
/// current networks; with `differentiate_k` the hinge gradient includes the path
/// through K, otherwise K is treated as a constant. The Lipschitz term is always
/// differentiated. policy_grads may be null when the policy is frozen.
LossBreakdown loss_and_gradients(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                                 const Discretization& disc, const SuccessorStore& store,
                                 const std::vector<std::size_t>& indices, double tau, double lambda, double delta,
                                 bool differentiate_k, GradientSet& rsm_grads, GradientSet* policy_grads);

struct LearnerState {
  OptimizerState rsm_opt;
  OptimizerState policy_opt;
  std::mt19937_64 rng;

  LearnerState(const MlpNetwork& policy, const MlpNetwork& rsm, const LearnerConfig& cfg, std::uint64_t seed);
};

/// One pass over shuffled minibatches of grid points. A frozen policy is left
/// bit-identical. Returns the loss averaged over the minibatches.
LossBreakdown train_epoch(const SystemSpec& sys, MlpNetwork& policy, MlpNetwork& rsm, const Discretization& disc,
                          SuccessorStore& store, const LearnerConfig& cfg, bool policy_trainable,
                          LearnerState& state);

/// train_epoch with the policy frozen, `epochs` times.
std::vector<LossBreakdown> pretrain_rsm(const SystemSpec& sys, const MlpNetwork& policy, MlpNetwork& rsm,
                                        const Discretization& disc, SuccessorStore& store, const LearnerConfig& cfg,
                                        int epochs, LearnerState& state);

enum class Outcome { stable, unknown, precondition_failed };
std::string to_string(Outcome outcome);
Outcome outcome_from_string(const std::string& text);

struct LossRecord {
  int loop_iteration = 0;  // 0: certificate pre-training
  int epoch = 0;
  LossBreakdown loss;
};

struct RunVerdict {
  Outcome outcome = Outcome::unknown;
  int iterations = 0;  // verifier calls made
  VerifierReport final_report;
  double seconds = 0.0;
  MlpNetwork policy;
  MlpNetwork rsm;
  std::uint64_t initial_policy_hash = 0;
  std::vector<std::uint64_t> policy_hashes;  // after every loop iteration
  std::vector<LossRecord> losses;
  std::string message;
};

/// Learner-verifier loop for an already initialised policy. When `run_dir` is set,
/// checkpoints, the loss curve, the final report and the verdict are written there.
RunVerdict learn_certificate(const SystemSpec& sys, MlpNetwork policy, const LearnerConfig& cfg, std::uint64_t seed,
                             const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                             std::optional<MlpNetwork> initial_rsm = std::nullopt);

struct AlgorithmConfig {
  LearnerConfig learner;
  PpoConfig ppo;
  int ppo_iterations = 50;
  std::vector<int> policy_hidden = {128, 128};
};

/// Seeded random policy followed by cfg.ppo_iterations PPO iterations; the callback
/// sees every intermediate policy, so one call yields all shorter pre-training budgets.
PretrainResult pretrain_policy(const SystemSpec& sys, const AlgorithmConfig& cfg, std::uint64_t seed,
                               const PretrainCallback& on_iteration = {});

/// Random policy -> PPO pre-training -> learn_certificate.
RunVerdict run_algorithm(const SystemSpec& sys, const AlgorithmConfig& cfg, std::uint64_t seed,
                         const std::optional<std::filesystem::path>& run_dir = std::nullopt);

MlpNetwork initial_policy(const SystemSpec& sys, const std::vector<int>& hidden, std::uint64_t seed);
MlpNetwork initial_rsm(const SystemSpec& sys, const std::vector<int>& hidden, std::uint64_t seed);

std::string format_verdict(const RunVerdict& verdict);
std::string loss_curve_csv(const std::vector<LossRecord>& losses);

}  // namespace rsmcert
