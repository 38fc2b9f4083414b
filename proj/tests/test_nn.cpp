#include <cmath>
#include <random>

#include "doctest.h"

#include "rsmcert/error.hpp"
#include "rsmcert/nn.hpp"
#include "support.hpp"

using namespace rsmcert;
using rsmcert::test::flatten;

TEST_CASE("forward: zero network returns zeros") {
  MlpNetwork net({3, 5, 2}, Activation::identity);
  const Eigen::VectorXd y = forward(net, Eigen::Vector3d(0.4, -2.0, 7.0));
  CHECK(y.size() == 2);
  CHECK(y.isZero(0.0));
}

TEST_CASE("forward: identity layer reproduces the input") {
  MlpNetwork net({2, 2}, Activation::identity);
  net.layer(0).weight = Eigen::Matrix2d::Identity();
  const Eigen::VectorXd y = forward(net, Eigen::Vector2d(0.3, -0.7));
  CHECK(y[0] == 0.3);
  CHECK(y[1] == -0.7);
}

TEST_CASE("forward: softplus of zero is ln 2") {
  MlpNetwork net({1, 1}, Activation::softplus);
  net.layer(0).weight(0, 0) = 1.0;
  CHECK(forward(net, Eigen::VectorXd::Zero(1))[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("forward: softplus output is strictly positive even for very negative inputs") {
  MlpNetwork net({1, 1}, Activation::softplus);
  net.layer(0).weight(0, 0) = 1.0;
  CHECK(forward(net, Eigen::VectorXd::Constant(1, -50.0))[0] > 0.0);
  CHECK(forward(net, Eigen::VectorXd::Constant(1, 800.0))[0] == doctest::Approx(800.0));
  const MlpNetwork r = MlpNetwork::random({2, 16, 1}, Activation::softplus, 3);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) CHECK(forward(r, test::uniform_vector(rng, 2, -100, 100))[0] > 0.0);
}

TEST_CASE("forward: dimension mismatch is a contract violation") {
  MlpNetwork net({2, 3, 1}, Activation::identity);
  CHECK_THROWS_AS(forward(net, Eigen::Vector3d::Zero()), ContractViolation);
  CHECK_THROWS_AS(MlpNetwork({2}, Activation::identity), ContractViolation);
  CHECK_THROWS_AS(MlpNetwork({2, 0, 1}, Activation::identity), ContractViolation);
}

TEST_CASE("forward_batch agrees with forward column by column") {
  const MlpNetwork net = MlpNetwork::random({3, 7, 5, 2}, Activation::identity, 11);
  std::mt19937_64 rng(2);
  Eigen::MatrixXd xs(3, 20);
  for (int c = 0; c < 20; ++c) xs.col(c) = test::uniform_vector(rng, 3, -2, 2);
  const Eigen::MatrixXd ys = forward_batch(net, xs);
  for (int c = 0; c < 20; ++c) CHECK((ys.col(c) - forward(net, xs.col(c))).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("random initialisation is seeded and bounded by 1/sqrt(fan_in)") {
  const MlpNetwork a = MlpNetwork::random({4, 9, 3}, Activation::identity, 5);
  const MlpNetwork b = MlpNetwork::random({4, 9, 3}, Activation::identity, 5);
  const MlpNetwork c = MlpNetwork::random({4, 9, 3}, Activation::identity, 6);
  CHECK(a == b);
  CHECK(a.parameter_hash() == b.parameter_hash());
  CHECK_FALSE(a == c);
  CHECK(a.layer(0).weight.cwiseAbs().maxCoeff() <= 0.5);
  CHECK(a.layer(1).weight.cwiseAbs().maxCoeff() <= 1.0 / 3.0);
  CHECK(a.parameter_count() == 4u * 9 + 9 + 9 * 3 + 3);
}

TEST_CASE("backward: squared output of a single linear weight has gradient 2w") {
  MlpNetwork net({1, 1}, Activation::identity);
  net.layer(0).weight(0, 0) = 0.75;
  const ForwardTrace tr = forward_trace(net, Eigen::MatrixXd::Ones(1, 1));
  GradientSet g = GradientSet::zeros_like(net);
  backward(net, tr, 2.0 * tr.output, g);
  CHECK(g.weight[0](0, 0) == doctest::Approx(1.5));
  CHECK(g.bias[0][0] == doctest::Approx(1.5));
}

TEST_CASE("backward: random 2-8-1 network matches central differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MlpNetwork net = MlpNetwork::random({2, 8, 1}, seed % 2 ? Activation::softplus : Activation::identity, seed);
    std::mt19937_64 rng(seed);
    const Eigen::VectorXd x = test::uniform_vector(rng, 2, -1, 1);
    // loss = V(x)^2 / 2 + V(x)
    auto loss = [&](const MlpNetwork& n) {
      const double v = forward(n, x)[0];
      return 0.5 * v * v + v;
    };
    const ForwardTrace tr = forward_trace(net, x);
    GradientSet g = GradientSet::zeros_like(net);
    Eigen::MatrixXd dout(1, 1);
    dout(0, 0) = tr.output(0, 0) + 1.0;
    backward(net, tr, dout, g);
    const Eigen::VectorXd fd = test::central_differences(net, loss, 1e-5);
    CHECK(test::relative_error(flatten(g), fd) < 1e-4);
  }
}

TEST_CASE("backward: input gradient matches central differences") {
  const MlpNetwork net = MlpNetwork::random({3, 10, 6, 1}, Activation::softplus, 4);
  Eigen::VectorXd x(3);
  x << 0.2, -0.4, 0.9;
  const ForwardTrace tr = forward_trace(net, x);
  GradientSet g = GradientSet::zeros_like(net);
  const Eigen::MatrixXd dx = backward(net, tr, Eigen::MatrixXd::Ones(1, 1), g);
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd up = x, down = x;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double fd = (forward(net, up)[0] - forward(net, down)[0]) / 2e-6;
    CHECK(dx(i, 0) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("backward: parameters the loss does not depend on get zero gradient") {
  const MlpNetwork net = MlpNetwork::random({2, 5, 2}, Activation::identity, 8);
  const ForwardTrace tr = forward_trace(net, Eigen::Vector2d(0.1, 0.3));
  GradientSet g = GradientSet::zeros_like(net);
  Eigen::MatrixXd dout(2, 1);
  dout << 1.0, 0.0;  // loss = first output only
  backward(net, tr, dout, g);
  CHECK(g.weight[1].row(1).isZero(0.0));
  CHECK(g.bias[1][1] == 0.0);
  CHECK_FALSE(g.weight[1].row(0).isZero(0.0));
}

TEST_CASE("backward: the ReLU subgradient at zero is zero") {
  MlpNetwork net({1, 1, 1}, Activation::identity);
  net.layer(0).weight(0, 0) = 1.0;
  net.layer(1).weight(0, 0) = 1.0;
  const ForwardTrace tr = forward_trace(net, Eigen::MatrixXd::Zero(1, 1));
  GradientSet g = GradientSet::zeros_like(net);
  const Eigen::MatrixXd dx = backward(net, tr, Eigen::MatrixXd::Ones(1, 1), g);
  CHECK(dx(0, 0) == 0.0);
  CHECK(g.weight[0](0, 0) == 0.0);
  CHECK(g.bias[0][0] == 0.0);
}

TEST_CASE("interval_forward: ReLU clamps the negative half of the input box") {
  MlpNetwork net({2, 2, 2}, Activation::identity);
  net.layer(0).weight = Eigen::Matrix2d::Identity();
  net.layer(1).weight = Eigen::Matrix2d::Identity();
  const IntervalBox out = interval_forward(net, test::square(2, 1.0));
  CHECK(out.contains(IntervalBox(Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 1))));
  CHECK(out.lower.isZero(0.0));
  CHECK(out.upper.isApprox(Eigen::Vector2d(1, 1)));
}

TEST_CASE("interval_forward: a constant network gives a degenerate box") {
  MlpNetwork net({2, 3, 2}, Activation::identity);
  net.layer(1).bias << 0.25, -4.0;
  const IntervalBox out = interval_forward(net, test::square(2, 10.0));
  CHECK(out.lower == out.upper);
  CHECK(out.lower.isApprox(Eigen::Vector2d(0.25, -4.0)));
}

TEST_CASE("interval_forward: Monte Carlo containment on random networks") {
  std::mt19937_64 rng(17);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Activation out_act = seed % 2 ? Activation::softplus : Activation::identity;
    const MlpNetwork net = MlpNetwork::random({3, 12, 9, 2}, out_act, seed);
    const Eigen::VectorXd c = test::uniform_vector(rng, 3, -1, 1);
    const Eigen::VectorXd r = test::uniform_vector(rng, 3, 0, 0.5);
    const IntervalBox box(c - r, c + r);
    const IntervalBox out = interval_forward(net, box);
    int outside = 0;
    for (int i = 0; i < 1000; ++i)
      if (!out.contains(forward(net, test::uniform_in(rng, box)), 1e-12)) ++outside;
    CHECK(outside == 0);
    // The corners are included too.
    CHECK(out.contains(forward(net, box.lower), 1e-12));
    CHECK(out.contains(forward(net, box.upper), 1e-12));
  }
}

TEST_CASE("interval_forward_batch agrees with interval_forward") {
  const MlpNetwork net = MlpNetwork::random({2, 6, 1}, Activation::softplus, 9);
  Eigen::MatrixXd lo(2, 3), hi(2, 3), olo, ohi;
  lo << -1, 0, 0.5, -1, -0.2, 0.1;
  hi = lo.array() + 0.3;
  interval_forward_batch(net, lo, hi, olo, ohi);
  for (int c = 0; c < 3; ++c) {
    const IntervalBox single = interval_forward(net, IntervalBox(lo.col(c), hi.col(c)));
    CHECK(olo(0, c) == doctest::Approx(single.lower[0]).epsilon(1e-14));
    CHECK(ohi(0, c) == doctest::Approx(single.upper[0]).epsilon(1e-14));
  }
}

TEST_CASE("lipschitz_constant: identity layer gives 1") {
  MlpNetwork net({3, 3}, Activation::identity);
  net.layer(0).weight = Eigen::Matrix3d::Identity();
  CHECK(lipschitz_constant(net) == 1.0);
}

TEST_CASE("lipschitz_constant: [[1,-2],[3,4]] gives its largest column sum 6") {
  Eigen::Matrix2d w;
  w << 1, -2, 3, 4;
  MlpNetwork net({2, 2}, Activation::identity);
  net.layer(0).weight = w;
  // Oracle: sup of |W x|_1 over random unit-L1 vectors approaches the induced norm from below.
  std::mt19937_64 rng(3);
  double best = 0.0;
  for (int i = 0; i < 200000; ++i) {
    Eigen::Vector2d x = test::uniform_vector(rng, 2, -1, 1);
    x /= x.lpNorm<1>();
    best = std::max(best, (w * x).lpNorm<1>());
  }
  CHECK(best <= 6.0 + 1e-12);
  CHECK(best > 5.99);
  CHECK(lipschitz_constant(net) == 6.0);
}

TEST_CASE("lipschitz_constant: two layers with norms 2 and 3 give 6") {
  MlpNetwork net({2, 2, 1}, Activation::softplus);
  net.layer(0).weight << 2.0, 0.0, 0.0, 1.0;
  net.layer(1).weight << -1.0, 3.0;
  CHECK(l1_operator_norm(net.layer(0).weight) == 2.0);
  CHECK(l1_operator_norm(net.layer(1).weight) == 3.0);
  CHECK(lipschitz_constant(net) == 6.0);
}

TEST_CASE("lipschitz_constant is sound on random pairs") {
  std::mt19937_64 rng(99);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MlpNetwork net = MlpNetwork::random({2, 20, 20, 2}, Activation::identity, seed);
    const double L = lipschitz_constant(net);
    for (int i = 0; i < 2000; ++i) {
      const Eigen::VectorXd x = test::uniform_vector(rng, 2, -3, 3);
      const Eigen::VectorXd y = test::uniform_vector(rng, 2, -3, 3);
      CHECK((forward(net, x) - forward(net, y)).lpNorm<1>() <= L * (x - y).lpNorm<1>() * (1 + 1e-12) + 1e-12);
    }
  }
}

TEST_CASE("accumulate_lipschitz_gradient matches central differences of the norm product") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const MlpNetwork net = MlpNetwork::random({2, 6, 4, 1}, Activation::softplus, seed + 100);
    GradientSet g = GradientSet::zeros_like(net);
    accumulate_lipschitz_gradient(net, 0.5, g);
    const Eigen::VectorXd fd =
        test::central_differences(net, [](const MlpNetwork& n) { return 0.5 * lipschitz_constant(n); }, 1e-7);
    CHECK(test::relative_error(flatten(g), fd) < 1e-6);
  }
}

TEST_CASE("serialization round trip is bit exact") {
  const MlpNetwork net = MlpNetwork::random({3, 17, 4, 2}, Activation::softplus, 21);
  const MlpNetwork back = deserialize_network(serialize_network(net));
  CHECK(back == net);
  CHECK(back.parameter_hash() == net.parameter_hash());
  CHECK(back.output_activation() == Activation::softplus);

  std::string bytes = serialize_network(net);
  bytes[0] = 'X';
  CHECK_THROWS(deserialize_network(bytes));
  CHECK_THROWS(deserialize_network(serialize_network(net).substr(0, 40)));
}

TEST_CASE("parameter_hash changes with any parameter") {
  MlpNetwork net = MlpNetwork::random({2, 3, 1}, Activation::identity, 1);
  const auto h = net.parameter_hash();
  net.layer(1).bias[0] = std::nextafter(net.layer(1).bias[0], 1.0);
  CHECK(net.parameter_hash() != h);
}

TEST_CASE("IntervalBox rejects inverted bounds") {
  CHECK_THROWS_AS(IntervalBox(Eigen::Vector2d(0, 1), Eigen::Vector2d(1, 0)), ContractViolation);
  const IntervalBox b(Eigen::Vector2d(-1, -1), Eigen::Vector2d(1, 1));
  CHECK(b.contains(Eigen::Vector2d(1, -1)));
  CHECK_FALSE(b.contains(Eigen::Vector2d(1.0 + 1e-9, 0)));
}
