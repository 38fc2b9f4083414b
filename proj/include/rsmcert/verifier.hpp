#pragma once

// Grid-based check of the expected-decrease condition
//   E_w[ V(f(x, pi(x), w)) ] < V(x) - tau * K,   K = L_V (L_f (L_pi + 1) + 1)
// at every point of a mesh-tau discretization of X \ X_s.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rsmcert/nn.hpp"
#include "rsmcert/system.hpp"

namespace rsmcert {

struct Discretization {
  Eigen::MatrixXd points;  // n x P, in grid order (first axis fastest)
  double mesh = 0.0;       // tau
  double spacing = 0.0;    // per-axis spacing tau / n

  std::size_t size() const { return static_cast<std::size_t>(points.cols()); }
  bool empty() const { return points.cols() == 0; }
};

/// Regular grid with spacing tau/n over X, without the points whose +-spacing
/// neighbourhood lies inside X_s. Every x in X \ X_s is within L1 distance tau/2 of a
/// kept point. Throws ResourceError when more than max_points would be produced.
Discretization build_discretization(const IntervalBox& state_space, const IntervalBox& safe_set, double tau,
                                    std::size_t max_points = 1'000'000);

/// Sampled successor states D_x per grid point. The disturbances are kept alongside
/// so the successors can be regenerated after the policy changes.
class SuccessorStore {
 public:
  SuccessorStore() = default;
  explicit SuccessorStore(std::size_t num_points) : noise_(num_points), successors_(num_points) {}

  std::size_t num_points() const { return noise_.size(); }
  std::size_t count(std::size_t point) const { return static_cast<std::size_t>(noise_.at(point).cols()); }
  std::size_t total() const;
  const Eigen::MatrixXd& noise(std::size_t point) const { return noise_.at(point); }
  const Eigen::MatrixXd& successors(std::size_t point) const { return successors_.at(point); }

  /// Draws `samples` disturbances for the point and appends the resulting successors.
  void sample(std::size_t point, const SystemSpec& sys, const MlpNetwork& policy, const Eigen::VectorXd& x,
              int samples, std::uint64_t seed);
  /// Recomputes every successor f(x, policy(x), w) from the stored disturbances.
  void refresh(const SystemSpec& sys, const MlpNetwork& policy, const Discretization& disc);

 private:
  std::vector<Eigen::MatrixXd> noise_;       // p x count
  std::vector<Eigen::MatrixXd> successors_;  // n x count
};

double compute_K(double lipschitz_f, double lipschitz_policy, double lipschitz_rsm);
double compute_K(double lipschitz_f, const MlpNetwork& policy, const MlpNetwork& rsm);

/// Absolute outward slack added to every expectation upper bound.
inline constexpr double kBoundSlack = 1e-9;

/// Sound upper bound on E_w[V(f(x, pi(x), w))]: the noise box is cut into
/// cells_per_axis^p cells, each cell is pushed through f with the action fixed at
/// pi(x) and then through the interval extension of V; the cell upper bounds are
/// weighted by the cell probabilities.
double bound_expectation_upper(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                               const Eigen::VectorXd& x, int cells_per_axis);

struct Counterexample {
  std::size_t index = 0;  // position in the discretization
  Eigen::VectorXd point;
  double expectation_bound = 0.0;
  double value = 0.0;   // V(x)
  double margin = 0.0;  // V(x) - tau K - bound; <= 0 for a violation
};

struct VerifierReport {
  bool certified = false;
  double K = 0.0;
  double lipschitz_rsm = 0.0;
  double lipschitz_policy = 0.0;
  double lipschitz_dynamics = 0.0;
  double tau = 0.0;
  int cells_per_axis = 0;
  std::vector<Counterexample> counterexamples;  // sorted by grid index
  std::size_t checked_points = 0;
  double seconds = 0.0;
};

struct VerifierOptions {
  int cells_per_axis = 8;
  int threads = 0;  // 0: hardware concurrency
};

/// Checks the decrease condition at every grid point. Points whose single-cell bound
/// already passes are accepted without refinement (any sound bound suffices); the
/// others are decided by the cells_per_axis refinement.
VerifierReport check_all(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                         const Discretization& disc, const VerifierOptions& options = {});

/// Appends `samples` fresh successors for every counterexample of the report.
void harvest_counterexamples(const VerifierReport& report, SuccessorStore& store, const SystemSpec& sys,
                             const MlpNetwork& policy, int samples, std::uint64_t seed);

/// JSON rendering of the report.
std::string format_report(const VerifierReport& report);

/// Deterministic 64-bit seed mixing (splitmix64 finaliser).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace rsmcert
