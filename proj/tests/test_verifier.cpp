#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"

#include "rsmcert/error.hpp"
#include "rsmcert/verifier.hpp"
#include "support.hpp"

using namespace rsmcert;
using test::square;

namespace {

// Nearest-point oracle by brute force over the kept grid.
double max_cover_distance(const Discretization& d, const IntervalBox& X, const IntervalBox& Xs, int samples,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int i = 0; i < samples; ++i) {
    const Eigen::VectorXd x = test::uniform_in(rng, X);
    if (Xs.contains(x)) continue;
    const double best = (d.points.colwise() - x).colwise().lpNorm<1>().minCoeff();
    worst = std::max(worst, best);
  }
  return worst;
}

struct Instance {
  SystemSpec sys;
  MlpNetwork policy;
  MlpNetwork rsm;
  Eigen::VectorXd x;
};

Instance random_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(2, 2);
  A.col(0) += test::uniform_vector(rng, 2, -0.3, 0.3);
  A.col(1) += test::uniform_vector(rng, 2, -0.3, 0.3);
  const Eigen::MatrixXd B = test::uniform_vector(rng, 2, -0.5, 0.5);
  const double nh = std::uniform_real_distribution<double>(0.01, 0.3)(rng);
  Instance inst{SystemSpec::make(square(2, 1.0), square(2, 0.2), A, B, square(2, nh)),
                MlpNetwork::random({2, 16, 1}, Activation::identity, seed + 1),
                MlpNetwork::random({2, 16, 16, 1}, Activation::softplus, seed + 2), Eigen::VectorXd()};
  inst.x = test::uniform_in(rng, inst.sys.state_space);
  return inst;
}

double monte_carlo_mean(const Instance& inst, int draws, std::uint64_t seed, double* stderr_out) {
  std::mt19937_64 rng(seed);
  const Eigen::VectorXd u = forward(inst.policy, inst.x);
  Eigen::MatrixXd next(2, draws);
  for (int k = 0; k < draws; ++k) next.col(k) = apply_dynamics(inst.sys, inst.x, u, inst.sys.noise.sample(rng));
  const Eigen::VectorXd v = forward_batch(inst.rsm, next).row(0).transpose();
  const double mean = v.mean();
  *stderr_out = std::sqrt((v.array() - mean).square().sum() / (draws - 1) / draws);
  return mean;
}

}  // namespace

TEST_CASE("build_discretization: the 9x9 example covers X \\ X_s within tau/2") {
  const IntervalBox X = square(2, 1.0), Xs = square(2, 0.2);
  const Discretization d = build_discretization(X, Xs, 0.5);
  CHECK(d.spacing == 0.25);
  // The only candidate near X_s is the origin, whose +-0.25 box sticks out of X_s.
  CHECK(d.size() == 81);
  CHECK(max_cover_distance(d, X, Xs, 100000, 1) < 0.5 / 2 + 1e-12);
}

TEST_CASE("build_discretization: dropped points are exactly those deep inside X_s") {
  const IntervalBox X = square(2, 1.0), Xs = square(2, 0.5);
  const Discretization d = build_discretization(X, Xs, 0.2);
  for (Eigen::Index c = 0; c < d.points.cols(); ++c) {
    const Eigen::VectorXd p = d.points.col(c);
    CHECK_FALSE(Xs.contains(IntervalBox(p.array() - d.spacing, p.array() + d.spacing)));
  }
  CHECK(d.size() < 21u * 21u);
  CHECK(max_cover_distance(d, X, Xs, 100000, 2) <= 0.1 + 1e-12);
}

TEST_CASE("build_discretization: X_s = X gives an empty grid, halving tau multiplies by about 4") {
  CHECK(build_discretization(square(2, 1.0), square(2, 1.0), 0.1).empty());
  const auto a = build_discretization(square(2, 1.0), square(2, 0.2), 0.1);
  const auto b = build_discretization(square(2, 1.0), square(2, 0.2), 0.05);
  CHECK(b.spacing == doctest::Approx(a.spacing / 2));
  const double ratio = static_cast<double>(b.size()) / static_cast<double>(a.size());
  CHECK(ratio > 3.5);
  CHECK(ratio < 4.5);
}

TEST_CASE("build_discretization: the point cap raises a resource error") {
  CHECK_THROWS_AS(build_discretization(square(2, 1.0), square(2, 0.2), 1e-4, 10000), ResourceError);
  CHECK_THROWS_AS(build_discretization(square(2, 1.0), square(2, 0.2), 0.0), ContractViolation);
}

TEST_CASE("compute_K: formula examples") {
  CHECK(compute_K(1.0, 3.0, 8.0) == 40.0);
  CHECK(compute_K(1.0, 3.0, 0.0) == 0.0);
  CHECK(compute_K(0.0, 3.0, 8.0) == 8.0);
  const MlpNetwork pi = test::zero_policy(2, 2);
  CHECK(compute_K(0.5, pi, test::l1_norm_network(2)) == 3.0);
}

TEST_CASE("bound_expectation_upper: constant RSM and zero-width noise are exact") {
  const SystemSpec sys = test::contraction_system();
  MlpNetwork constant({2, 4, 1}, Activation::identity);
  constant.layer(1).bias[0] = 0.37;
  const MlpNetwork pi = MlpNetwork::random({2, 8, 2}, Activation::identity, 3);
  const double b = bound_expectation_upper(sys, pi, constant, Eigen::Vector2d(0.4, 0.9), 4);
  CHECK(b >= 0.37);
  CHECK(b <= 0.37 + 2 * kBoundSlack);

  const SystemSpec quiet = SystemSpec::make(square(2, 1.0), square(2, 0.2), 0.5 * Eigen::MatrixXd::Identity(2, 2),
                                            Eigen::MatrixXd::Identity(2, 2), square(2, 0.0));
  const MlpNetwork V = MlpNetwork::random({2, 16, 1}, Activation::softplus, 4);
  const Eigen::Vector2d x(0.6, -0.3);
  const Eigen::VectorXd exact = forward(V, apply_dynamics(quiet, x, forward(pi, x), Eigen::Vector2d::Zero()));
  CHECK(bound_expectation_upper(quiet, pi, V, x, 8) == doctest::Approx(exact[0]).epsilon(1e-9));
}

TEST_CASE("bound_expectation_upper: sound against Monte Carlo and monotone under refinement") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Instance inst = random_instance(seed);
    double se = 0.0;
    const double mc = monte_carlo_mean(inst, 20000, seed + 100, &se);
    double previous = std::numeric_limits<double>::infinity();
    for (int cells : {1, 2, 4, 8, 16}) {
      const double b = bound_expectation_upper(inst.sys, inst.policy, inst.rsm, inst.x, cells);
      CHECK(b >= mc - 3.0 * se);
      CHECK(b <= previous + 1e-9);
      previous = b;
    }
  }
}

TEST_CASE("check_all: the L1-norm certificate of the contraction system is accepted") {
  const SystemSpec sys = test::contraction_system();
  const MlpNetwork pi = test::zero_policy(2, 2);
  const MlpNetwork V = test::l1_norm_network(2);
  const Discretization d = build_discretization(sys.state_space, sys.safe_set, 0.025);
  const VerifierReport r = check_all(sys, pi, V, d);
  CHECK(r.K == 3.0);
  CHECK(r.tau * r.K < 0.08);
  CHECK(r.certified);
  CHECK(r.counterexamples.empty());
  CHECK(r.checked_points == d.size());
}

TEST_CASE("check_all: identity dynamics yield counterexamples with negative margins") {
  const SystemSpec sys = test::contraction_system(1.0);
  const MlpNetwork pi = test::zero_policy(2, 2);
  const MlpNetwork V = test::l1_norm_network(2);
  const Discretization d = build_discretization(sys.state_space, sys.safe_set, 0.1);
  const VerifierReport r = check_all(sys, pi, V, d);
  CHECK_FALSE(r.certified);
  REQUIRE_FALSE(r.counterexamples.empty());
  for (std::size_t i = 0; i < r.counterexamples.size(); ++i) {
    const auto& c = r.counterexamples[i];
    CHECK(c.margin <= 0.0);
    CHECK(c.margin == doctest::Approx(c.value - r.tau * r.K - c.expectation_bound));
    CHECK(c.point == d.points.col(static_cast<Eigen::Index>(c.index)));
    if (i > 0) CHECK(r.counterexamples[i - 1].index < c.index);
  }
  CHECK(format_report(r).find("not_certified") != std::string::npos);
}

TEST_CASE("check_all: an empty grid is certified vacuously") {
  const SystemSpec sys = test::contraction_system(1.0);
  const VerifierReport r =
      check_all(sys, test::zero_policy(2, 2), test::l1_norm_network(2), Discretization{Eigen::MatrixXd(2, 0), 0.1, 0.05});
  CHECK(r.certified);
  CHECK(r.checked_points == 0);
}

TEST_CASE("check_all: the report does not depend on the thread count or point order") {
  const Instance inst = random_instance(7);
  const Discretization d = build_discretization(inst.sys.state_space, inst.sys.safe_set, 0.1);
  const VerifierReport one = check_all(inst.sys, inst.policy, inst.rsm, d, {4, 1});
  const VerifierReport many = check_all(inst.sys, inst.policy, inst.rsm, d, {4, 3});
  REQUIRE(one.counterexamples.size() == many.counterexamples.size());
  for (std::size_t i = 0; i < one.counterexamples.size(); ++i) {
    CHECK(one.counterexamples[i].index == many.counterexamples[i].index);
    CHECK(one.counterexamples[i].expectation_bound == many.counterexamples[i].expectation_bound);
  }

  Discretization reversed = d;
  reversed.points = d.points.rowwise().reverse();
  const VerifierReport rev = check_all(inst.sys, inst.policy, inst.rsm, reversed, {4, 1});
  REQUIRE(rev.counterexamples.size() == one.counterexamples.size());
  std::vector<double> a, b;
  for (const auto& c : one.counterexamples) a.push_back(c.point[0] * 10 + c.point[1]);
  for (const auto& c : rev.counterexamples) b.push_back(c.point[0] * 10 + c.point[1]);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("harvest_counterexamples: seeded accumulation") {
  const SystemSpec sys = test::contraction_system(1.0);
  const MlpNetwork pi = test::zero_policy(2, 2);
  VerifierReport r;
  r.counterexamples.push_back({3, Eigen::Vector2d(0.9, 0.9), 0.0, 0.0, 0.0});
  SuccessorStore store(5);
  harvest_counterexamples(r, store, sys, pi, 10, 1);
  CHECK(store.count(3) == 10);
  CHECK(store.total() == 10);
  harvest_counterexamples(r, store, sys, pi, 10, 1);
  CHECK(store.count(3) == 20);
  // A second harvest draws fresh disturbances.
  CHECK_FALSE(store.noise(3).leftCols(10) == store.noise(3).rightCols(10));
  for (Eigen::Index k = 0; k < 20; ++k)
    CHECK(store.successors(3).col(k) ==
          apply_dynamics(sys, Eigen::Vector2d(0.9, 0.9), Eigen::Vector2d::Zero(), store.noise(3).col(k)));

  const SystemSpec quiet = SystemSpec::make(square(2, 1.0), square(2, 0.2), Eigen::MatrixXd::Identity(2, 2),
                                            Eigen::MatrixXd::Zero(2, 2), square(2, 0.0));
  SuccessorStore q(5);
  harvest_counterexamples(r, q, quiet, pi, 10, 1);
  for (Eigen::Index k = 1; k < 10; ++k) CHECK(q.successors(3).col(k) == q.successors(3).col(0));
}

TEST_CASE("SuccessorStore::refresh regenerates successors under a new policy") {
  const SystemSpec sys = SystemSpec::make(square(2, 1.0), square(2, 0.2), Eigen::MatrixXd::Identity(2, 2),
                                          Eigen::MatrixXd::Identity(2, 2), square(2, 0.05));
  const Discretization d = build_discretization(sys.state_space, sys.safe_set, 0.5);
  SuccessorStore store(d.size());
  const MlpNetwork zero = test::zero_policy(2, 2);
  store.sample(0, sys, zero, d.points.col(0), 4, 9);
  const MlpNetwork pi = test::linear_policy_network(-0.5 * Eigen::MatrixXd::Identity(2, 2));
  store.refresh(sys, pi, d);
  const Eigen::VectorXd x = d.points.col(0);
  for (Eigen::Index k = 0; k < 4; ++k)
    CHECK(store.successors(0).col(k).isApprox(apply_dynamics(sys, x, forward(pi, x), store.noise(0).col(k))));
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
