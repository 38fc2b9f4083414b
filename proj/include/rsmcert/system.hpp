#pragma once

// Stochastic discrete-time control system
//   x_{t+1} = clip_X(A x_t + B u_t + w_t),   u_t = policy(x_t),   w_t ~ Uniform(noise box)

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "rsmcert/nn.hpp"

namespace rsmcert {

/// Uniform distribution over a bounded box. Degenerate axes put all mass on one value.
struct NoiseModel {
  IntervalBox support;

  int dim() const { return static_cast<int>(support.dim()); }
  Eigen::VectorXd sample(std::mt19937_64& rng) const;
  /// Probability mass of the part of `cell` that lies inside the support.
  double cell_probability(const IntervalBox& cell) const;
};

struct AffineDynamics {
  Eigen::MatrixXd A;  // n x n
  Eigen::MatrixXd B;  // n x m
  /// Declared L1 Lipschitz constant: |f(x,u,w) - f(x',u',w)|_1 <= L (|x-x'|_1 + |u-u'|_1).
  double lipschitz = 0.0;
};

/// max(|A|_1, |B|_1); a valid Lipschitz constant for the saturated affine map.
double affine_lipschitz_bound(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

struct SystemSpec {
  IntervalBox state_space;  // X, compact and non-degenerate
  IntervalBox safe_set;     // X_s, closed box inside X
  AffineDynamics dynamics;
  NoiseModel noise;

  int state_dim() const { return static_cast<int>(state_space.dim()); }
  int action_dim() const { return static_cast<int>(dynamics.B.cols()); }

  /// Throws ContractViolation when shapes or boxes are inconsistent.
  void validate() const;

  /// Builds and validates a system; a missing Lipschitz constant is computed from A and B.
  static SystemSpec make(IntervalBox state_space, IntervalBox safe_set, Eigen::MatrixXd A, Eigen::MatrixXd B,
                         IntervalBox noise_support, std::optional<double> lipschitz = std::nullopt);

  Eigen::VectorXd sample_state(std::mt19937_64& rng) const;
};

/// The benchmark used when no system is configured (see README for its rationale).
SystemSpec default_benchmark();

Eigen::VectorXd clip_to_box(const Eigen::VectorXd& x, const IntervalBox& box);

/// clip_X(A x + B u + w).
Eigen::VectorXd apply_dynamics(const SystemSpec& sys, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                               const Eigen::VectorXd& w);

/// One closed-loop step with the policy's deterministic action. x must lie in X.
Eigen::VectorXd step(const SystemSpec& sys, const MlpNetwork& policy, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& w);

/// Indicator of the closed safe set.
double reward(const SystemSpec& sys, const Eigen::VectorXd& x);

struct Trajectory {
  std::vector<Eigen::VectorXd> states;   // horizon + 1 entries
  std::vector<Eigen::VectorXd> actions;  // horizon entries
  std::vector<double> rewards;           // reward of the state reached by each action
  std::vector<Eigen::VectorXd> noise;    // disturbance drawn at each step
};

/// Seeded rollout. With exploration_std > 0 each action is policy(x) + N(0, std^2 I).
Trajectory rollout(const SystemSpec& sys, const MlpNetwork& policy, const Eigen::VectorXd& x0, int horizon,
                   double exploration_std, std::uint64_t seed);

/// Interval enclosure of clip_X(A x + B policy(x) + w) over x in `states`, w in `noise`.
IntervalBox dynamics_enclosure(const SystemSpec& sys, const MlpNetwork& policy, const IntervalBox& states,
                               const IntervalBox& noise);

struct ClosednessResult {
  bool closed = false;
  /// For a failed check: the offending part of X_s and its image enclosure.
  std::optional<IntervalBox> source;
  std::optional<IntervalBox> witness;
};

/// Sound check that X_s is mapped into itself for every disturbance. X_s is split into
/// splits_per_axis^n sub-boxes and each is propagated through f with interval arithmetic.
ClosednessResult check_closed_under_dynamics(const SystemSpec& sys, const MlpNetwork& policy,
                                             int splits_per_axis = 1);

}  // namespace rsmcert
