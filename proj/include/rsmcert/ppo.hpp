#pragma once

// Policy pre-training with proximal policy optimization on the safe-set indicator
// reward. The policy network predicts the mean of a Gaussian whose standard deviation
// follows a linear decay schedule over iterations.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsmcert/nn.hpp"
#include "rsmcert/optimizer.hpp"
#include "rsmcert/system.hpp"

namespace rsmcert {

struct PpoConfig {
  int episodes_per_iter = 30;
  int horizon = 200;
  double gamma = 0.99;
  double clip_epsilon = 0.2;
  double std_start = 0.5;
  double std_end = 0.05;
  int std_decay_end_iter = 50;
  int policy_epochs = 10;
  int policy_epochs_first = 30;
  int value_epochs = 5;
  int value_epochs_first = 10;
  double policy_lipschitz_threshold = 3.0;
  double lipschitz_weight = 1e-3;  // lambda
  double policy_learning_rate = 5e-5;
  double value_learning_rate = 5e-4;
  std::vector<int> value_hidden = {128, 128};
  int minibatch_size = 64;  // 0: one full-buffer batch per epoch

  void validate() const;
};

/// Standard deviation of the exploration noise in (1-based) iteration `iter`.
double exploration_std(int iter, const PpoConfig& cfg);

double gaussian_log_prob(const Eigen::VectorXd& action, const Eigen::VectorXd& mean, double stddev);

struct RolloutBuffer {
  Eigen::MatrixXd states;   // n x T
  Eigen::MatrixXd actions;  // m x T
  Eigen::VectorXd log_probs;
  Eigen::VectorXd returns;
  Eigen::VectorXd advantages;  // normalised over the buffer
  double stddev = 0.0;
  double mean_episode_reward = 0.0;

  Eigen::Index size() const { return states.cols(); }
};

/// Discounted reward-to-go of one episode.
std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma);

/// Subtracts the mean and divides by max(std, 1e-8).
void normalize_advantages(Eigen::VectorXd& advantages);

RolloutBuffer collect_rollouts(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& value_net, int iter,
                               const PpoConfig& cfg, std::uint64_t seed);

/// Per-sample clipped surrogate min(r A, clip(r, 1-eps, 1+eps) A).
double clipped_surrogate(double ratio, double advantage, double epsilon);

struct PpoUpdateStats {
  int policy_epochs = 0;
  int value_epochs = 0;
  double initial_surrogate = 0.0;  // mean surrogate before the first policy step
  double final_value_loss = 0.0;
};

/// Clipped-surrogate policy epochs (with the Lipschitz penalty) followed by
/// squared-error value regression, using the scheduled epoch counts for `iter`.
PpoUpdateStats ppo_update(MlpNetwork& policy, MlpNetwork& value_net, const RolloutBuffer& buffer, int iter,
                          const PpoConfig& cfg, OptimizerState& policy_opt, OptimizerState& value_opt,
                          std::uint64_t seed = 0);

struct PpoIterationLog {
  int iteration = 0;
  double mean_reward = 0.0;
  double stddev = 0.0;
  double policy_lipschitz = 0.0;
  int policy_epochs = 0;
  int value_epochs = 0;
};

struct PretrainResult {
  MlpNetwork policy;
  std::vector<PpoIterationLog> log;
};

/// Called after every completed iteration with the current policy.
using PretrainCallback = std::function<void(int iteration, const MlpNetwork& policy)>;

PretrainResult pretrain(const SystemSpec& sys, MlpNetwork policy, int num_iterations, const PpoConfig& cfg,
                        std::uint64_t seed, const PretrainCallback& on_iteration = {});

/// CSV with columns iteration,mean_reward,std,lipschitz_policy,policy_epochs,value_epochs.
std::string training_curve_csv(const std::vector<PpoIterationLog>& log);

}  // namespace rsmcert
