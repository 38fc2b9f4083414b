#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "rsmcert/nn.hpp"
#include "rsmcert/learner.hpp"
#include "rsmcert/system.hpp"
#include "rsmcert/verifier.hpp"

namespace rsmcert::test {

inline Eigen::VectorXd uniform_vector(std::mt19937_64& rng, Eigen::Index n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

inline Eigen::VectorXd uniform_in(std::mt19937_64& rng, const IntervalBox& box) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Eigen::VectorXd v(box.dim());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = box.lower[i] + d(rng) * (box.upper[i] - box.lower[i]);
  return v;
}

inline IntervalBox square(int n, double half) {
  return IntervalBox(Eigen::VectorXd::Constant(n, -half), Eigen::VectorXd::Constant(n, half));
}

// V(x) = |x_1| + ... + |x_n| written as a ReLU network: |z| = relu(z) + relu(-z).
inline MlpNetwork l1_norm_network(int n) {
  MlpNetwork net({n, 2 * n, 1}, Activation::identity);
  auto& w1 = net.layer(0).weight;
  for (int i = 0; i < n; ++i) {
    w1(2 * i, i) = 1.0;
    w1(2 * i + 1, i) = -1.0;
  }
  net.layer(1).weight.setOnes();
  return net;
}

// u = M x written as a ReLU network (x = relu(x) - relu(-x)).
inline MlpNetwork linear_policy_network(const Eigen::MatrixXd& M) {
  const int n = static_cast<int>(M.cols());
  const int m = static_cast<int>(M.rows());
  MlpNetwork net({n, 2 * n, m}, Activation::identity);
  auto& w1 = net.layer(0).weight;
  auto& w2 = net.layer(1).weight;
  for (int i = 0; i < n; ++i) {
    w1(2 * i, i) = 1.0;
    w1(2 * i + 1, i) = -1.0;
    w2.col(2 * i) = M.col(i);
    w2.col(2 * i + 1) = -M.col(i);
  }
  return net;
}

inline MlpNetwork zero_policy(int n, int m) { return MlpNetwork({n, 4, m}, Activation::identity); }

// A = 0.5 I (or another diagonal), B = 0, X = [-1,1]^2, X_s = [-0.2,0.2]^2, noise +-0.01.
inline SystemSpec contraction_system(double a = 0.5) {
  return SystemSpec::make(square(2, 1.0), square(2, 0.2), a * Eigen::MatrixXd::Identity(2, 2),
                          Eigen::MatrixXd::Zero(2, 2), square(2, 0.01));
}

inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

// Flattens/unflattens all parameters of a network (layer by layer, weights then bias).
inline Eigen::VectorXd flatten(const MlpNetwork& net) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(net.parameter_count()));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) out[k++] = layer.weight(r, c);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) out[k++] = layer.bias[r];
  }
  return out;
}

inline void unflatten(MlpNetwork& net, const Eigen::VectorXd& v) {
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& layer = net.layer(l);
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = v[k++];
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = v[k++];
  }
}

inline Eigen::VectorXd flatten(const GradientSet& g) {
  Eigen::Index size = 0;
  for (std::size_t l = 0; l < g.weight.size(); ++l) size += g.weight[l].size() + g.bias[l].size();
  Eigen::VectorXd out(size);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < g.weight.size(); ++l) {
    for (Eigen::Index c = 0; c < g.weight[l].cols(); ++c)
      for (Eigen::Index r = 0; r < g.weight[l].rows(); ++r) out[k++] = g.weight[l](r, c);
    for (Eigen::Index r = 0; r < g.bias[l].size(); ++r) out[k++] = g.bias[l][r];
  }
  return out;
}

template <typename F>
Eigen::VectorXd central_differences(MlpNetwork net, F&& f, double h) {
  Eigen::VectorXd theta = flatten(net);
  Eigen::VectorXd grad(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    unflatten(net, theta);
    const double up = f(net);
    theta[i] = saved - h;
    unflatten(net, theta);
    const double down = f(net);
    theta[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// A random loss configuration for gradient checks: small networks, a handful of grid
// points with stored disturbances, successors well inside X so the clip is inactive.
struct LossFixture {
  SystemSpec sys;
  MlpNetwork policy;
  MlpNetwork rsm;
  Discretization disc;
  SuccessorStore store;
  std::vector<std::size_t> indices;
  double tau = 0.0;
  double lambda = 0.0;
  double delta = 0.0;
};

inline LossFixture make_loss_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LossFixture f;
  Eigen::MatrixXd A(2, 2), B(2, 1);
  A << 0.6, 0.1, -0.1, 0.6;
  B.col(0) = uniform_vector(rng, 2, 0.2, 0.5);
  f.sys = SystemSpec::make(square(2, 10.0), square(2, 0.5), A, B, square(2, 0.05));
  f.policy = MlpNetwork::random({2, 6, 1}, Activation::identity, seed * 3 + 1);
  f.rsm = MlpNetwork::random({2, 8, 8, 1}, Activation::softplus, seed * 3 + 2);
  const int k = 12;
  f.disc.points.resize(2, k);
  for (int i = 0; i < k; ++i) f.disc.points.col(i) = uniform_vector(rng, 2, -1.0, 1.0);
  f.disc.mesh = 0.1;
  f.disc.spacing = 0.05;
  f.store = SuccessorStore(k);
  for (int i = 0; i < k; ++i) f.store.sample(i, f.sys, f.policy, f.disc.points.col(i), 5, seed * 100 + i);
  for (int i = 0; i < k; ++i) f.indices.push_back(static_cast<std::size_t>(i));
  f.tau = std::uniform_real_distribution<double>(0.01, 0.1)(rng);
  f.lambda = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  // Threshold below L_V so the Lipschitz term is active.
  f.delta = 0.5 * f.tau * (f.sys.dynamics.lipschitz * (lipschitz_constant(f.policy) + 1) + 1) * lipschitz_constant(f.rsm);
  return f;
}

// Total loss recomputed from scratch; with frozen_K the hinge uses that constant.
inline double fixture_loss(const LossFixture& f, const MlpNetwork& policy, const MlpNetwork& rsm,
                           std::optional<double> frozen_K) {
  const double K = frozen_K ? *frozen_K : compute_K(f.sys.dynamics.lipschitz, policy, rsm);
  return rsm_loss(f.sys, policy, rsm, f.disc, f.store, f.tau, K) +
         f.lambda * lipschitz_loss(policy, rsm, f.tau, f.sys.dynamics.lipschitz, f.delta);
}

struct GradientCheck {
  double rsm_error = 0.0;
  double policy_error = 0.0;
  bool hinge_active = false;
};

inline GradientCheck check_loss_gradients(const LossFixture& f, bool differentiate_k, double h = 1e-6) {
  GradientSet gr = GradientSet::zeros_like(f.rsm);
  GradientSet gp = GradientSet::zeros_like(f.policy);
  const LossBreakdown lb =
      loss_and_gradients(f.sys, f.policy, f.rsm, f.disc, f.store, f.indices, f.tau, f.lambda, f.delta, differentiate_k, gr, &gp);
  std::optional<double> frozen;
  if (!differentiate_k) frozen = compute_K(f.sys.dynamics.lipschitz, f.policy, f.rsm);
  const Eigen::VectorXd fd_r =
      central_differences(f.rsm, [&](const MlpNetwork& r) { return fixture_loss(f, f.policy, r, frozen); }, h);
  const Eigen::VectorXd fd_p =
      central_differences(f.policy, [&](const MlpNetwork& p) { return fixture_loss(f, p, f.rsm, frozen); }, h);
  // With K frozen the Lipschitz term's dependence on L_pi still counts.
  return {relative_error(flatten(gr), fd_r), relative_error(flatten(gp), fd_p), lb.rsm_loss > 0.0};
}

}  // namespace rsmcert::test
