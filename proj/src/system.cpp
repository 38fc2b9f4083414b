#include "rsmcert/system.hpp"

#include <cmath>

#include "rsmcert/error.hpp"

namespace rsmcert {

Eigen::VectorXd NoiseModel::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd w(support.dim());
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = support.lower[i] + unit(rng) * (support.upper[i] - support.lower[i]);
  return w;
}

double NoiseModel::cell_probability(const IntervalBox& cell) const {
  require(cell.dim() == support.dim(), "cell dimension does not match noise dimension");
  double p = 1.0;
  for (Eigen::Index i = 0; i < support.dim(); ++i) {
    const double width = support.upper[i] - support.lower[i];
    const double lo = std::max(cell.lower[i], support.lower[i]);
    const double hi = std::min(cell.upper[i], support.upper[i]);
    if (width == 0.0) {
      if (!(cell.lower[i] <= support.lower[i] && support.lower[i] <= cell.upper[i])) return 0.0;
      continue;
    }
    if (hi <= lo) return 0.0;
    p *= (hi - lo) / width;
  }
  return p;
}

double affine_lipschitz_bound(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  return std::max(l1_operator_norm(A), l1_operator_norm(B));
}

void SystemSpec::validate() const {
  const auto n = state_space.dim();
  require(n > 0, "state space must have positive dimension");
  for (Eigen::Index i = 0; i < n; ++i)
    require(state_space.lower[i] < state_space.upper[i] && std::isfinite(state_space.lower[i]) &&
                std::isfinite(state_space.upper[i]),
            "state space must be a finite non-degenerate box");
  require(safe_set.dim() == n, "safe set dimension does not match state space");
  require(state_space.contains(safe_set), "safe set must lie inside the state space");
  for (Eigen::Index i = 0; i < n; ++i)
    require(safe_set.lower[i] < safe_set.upper[i], "safe set must have a non-empty interior");
  require(dynamics.A.rows() == n && dynamics.A.cols() == n, "A must be n x n");
  require(dynamics.B.rows() == n && dynamics.B.cols() > 0, "B must be n x m with m > 0");
  require(dynamics.A.allFinite() && dynamics.B.allFinite(), "dynamics matrices must be finite");
  require(noise.support.dim() == n, "noise enters additively and must match the state dimension");
  require(noise.support.lower.allFinite() && noise.support.upper.allFinite(), "noise support must be bounded");
  require(dynamics.lipschitz > 0.0, "Lipschitz constant of the dynamics must be positive");
  require(dynamics.lipschitz >= affine_lipschitz_bound(dynamics.A, dynamics.B) * (1.0 - 1e-12),
          "declared Lipschitz constant is smaller than max(|A|_1, |B|_1)");
}

SystemSpec SystemSpec::make(IntervalBox state_space, IntervalBox safe_set, Eigen::MatrixXd A, Eigen::MatrixXd B,
                            IntervalBox noise_support, std::optional<double> lipschitz) {
  SystemSpec sys;
  sys.state_space = std::move(state_space);
  sys.safe_set = std::move(safe_set);
  const double bound = affine_lipschitz_bound(A, B);
  sys.dynamics = {std::move(A), std::move(B), lipschitz.value_or(bound > 0.0 ? bound : 1.0)};
  sys.noise = {std::move(noise_support)};
  sys.validate();
  return sys;
}

Eigen::VectorXd SystemSpec::sample_state(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd x(state_dim());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    x[i] = state_space.lower[i] + unit(rng) * (state_space.upper[i] - state_space.lower[i]);
  return x;
}

SystemSpec default_benchmark() {
  // Mildly unstable, fully actuated. The open loop leaves X_s through every face, so an
  // untrained policy fails the closedness check while a pre-trained one passes it.
  Eigen::MatrixXd A(2, 2);
  A << 1.1, 0.1,
       0.0, 1.1;
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(2, 2);
  return SystemSpec::make(IntervalBox(Eigen::Vector2d(-1.0, -1.0), Eigen::Vector2d(1.0, 1.0)),
                          IntervalBox(Eigen::Vector2d(-0.4, -0.4), Eigen::Vector2d(0.4, 0.4)), A, B,
                          IntervalBox(Eigen::Vector2d(-0.02, -0.02), Eigen::Vector2d(0.02, 0.02)));
}

Eigen::VectorXd clip_to_box(const Eigen::VectorXd& x, const IntervalBox& box) {
  return x.cwiseMax(box.lower).cwiseMin(box.upper);
}

Eigen::VectorXd apply_dynamics(const SystemSpec& sys, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                               const Eigen::VectorXd& w) {
  require(x.size() == sys.state_dim(), "state dimension mismatch");
  require(u.size() == sys.action_dim(), "action dimension mismatch");
  require(w.size() == sys.noise.dim(), "noise dimension mismatch");
  return clip_to_box(sys.dynamics.A * x + sys.dynamics.B * u + w, sys.state_space);
}

Eigen::VectorXd step(const SystemSpec& sys, const MlpNetwork& policy, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& w) {
  require(sys.state_space.contains(x, 1e-12), "state lies outside the state space");
  return apply_dynamics(sys, x, forward(policy, x), w);
}

double reward(const SystemSpec& sys, const Eigen::VectorXd& x) { return sys.safe_set.contains(x) ? 1.0 : 0.0; }

Trajectory rollout(const SystemSpec& sys, const MlpNetwork& policy, const Eigen::VectorXd& x0, int horizon,
                   double exploration_std, std::uint64_t seed) {
  require(horizon >= 0, "horizon must be non-negative");
  require(exploration_std >= 0.0, "exploration std must be non-negative");
  require(sys.state_space.contains(x0, 1e-12), "initial state lies outside the state space");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Trajectory traj;
  traj.states.reserve(static_cast<std::size_t>(horizon) + 1);
  traj.states.push_back(x0);
  for (int t = 0; t < horizon; ++t) {
    const Eigen::VectorXd& x = traj.states.back();
    Eigen::VectorXd u = forward(policy, x);
    if (exploration_std > 0.0)
      for (Eigen::Index i = 0; i < u.size(); ++i) u[i] += exploration_std * gauss(rng);
    Eigen::VectorXd w = sys.noise.sample(rng);
    Eigen::VectorXd next = apply_dynamics(sys, x, u, w);
    traj.rewards.push_back(reward(sys, next));
    traj.actions.push_back(std::move(u));
    traj.noise.push_back(std::move(w));
    traj.states.push_back(std::move(next));
  }
  return traj;
}

namespace {

// Enclosure of M * x for x in the box, by center/radius arithmetic.
void linear_image(const Eigen::MatrixXd& m, const IntervalBox& box, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
  const Eigen::VectorXd c = m * box.center();
  const Eigen::VectorXd r = m.cwiseAbs() * (0.5 * box.width());
  lo = c - r;
  hi = c + r;
}

}  // namespace

IntervalBox dynamics_enclosure(const SystemSpec& sys, const MlpNetwork& policy, const IntervalBox& states,
                               const IntervalBox& noise) {
  require(states.dim() == sys.state_dim() && noise.dim() == sys.noise.dim(), "enclosure dimension mismatch");
  const IntervalBox actions = interval_forward(policy, states);
  Eigen::VectorXd ax_lo, ax_hi, bu_lo, bu_hi;
  linear_image(sys.dynamics.A, states, ax_lo, ax_hi);
  linear_image(sys.dynamics.B, actions, bu_lo, bu_hi);
  Eigen::VectorXd lo = ax_lo + bu_lo + noise.lower;
  Eigen::VectorXd hi = ax_hi + bu_hi + noise.upper;
  return IntervalBox(clip_to_box(lo, sys.state_space), clip_to_box(hi, sys.state_space));
}

ClosednessResult check_closed_under_dynamics(const SystemSpec& sys, const MlpNetwork& policy, int splits_per_axis) {
  require(splits_per_axis >= 1, "splits_per_axis must be at least 1");
  const int n = sys.state_dim();
  const Eigen::VectorXd cell = sys.safe_set.width() / splits_per_axis;
  std::vector<int> index(static_cast<std::size_t>(n), 0);
  while (true) {
    Eigen::VectorXd lo(n), hi(n);
    for (int i = 0; i < n; ++i) {
      lo[i] = sys.safe_set.lower[i] + index[static_cast<std::size_t>(i)] * cell[i];
      hi[i] = index[static_cast<std::size_t>(i)] + 1 == splits_per_axis ? sys.safe_set.upper[i] : lo[i] + cell[i];
    }
    IntervalBox source(lo, hi);
    IntervalBox image = dynamics_enclosure(sys, policy, source, sys.noise.support);
    if (!sys.safe_set.contains(image)) return {false, std::move(source), std::move(image)};
    int d = 0;
    while (d < n && ++index[static_cast<std::size_t>(d)] == splits_per_axis) index[static_cast<std::size_t>(d++)] = 0;
    if (d == n) break;
  }
  return {true, std::nullopt, std::nullopt};
}

}  // namespace rsmcert
