#include "rsmcert/verifier.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include "json.hpp"

#include "parallel.hpp"
#include "rsmcert/error.hpp"

namespace rsmcert {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Discretization build_discretization(const IntervalBox& state_space, const IntervalBox& safe_set, double tau,
                                    std::size_t max_points) {
  require(tau > 0.0 && std::isfinite(tau), "mesh tau must be positive");
  require(safe_set.dim() == state_space.dim(), "safe set dimension does not match state space");
  const auto n = static_cast<int>(state_space.dim());
  const double g = tau / n;

  std::vector<int> per_axis(static_cast<std::size_t>(n));
  double total = 1.0;
  for (int i = 0; i < n; ++i) {
    const double width = state_space.upper[i] - state_space.lower[i];
    per_axis[static_cast<std::size_t>(i)] = static_cast<int>(std::ceil(width / g - 1e-9)) + 1;
    total *= per_axis[static_cast<std::size_t>(i)];
  }
  if (total > static_cast<double>(max_points) * 4.0 + 16.0)
    throw ResourceError("discretization with mesh " + std::to_string(tau) + " needs about " +
                        std::to_string(static_cast<long long>(total)) + " points (cap " +
                        std::to_string(max_points) + ")");

  auto coordinate = [&](int axis, int k) {
    const double v = state_space.lower[axis] + k * g;
    return k + 1 == per_axis[static_cast<std::size_t>(axis)] ? state_space.upper[axis] : std::min(v, state_space.upper[axis]);
  };

  std::vector<double> kept;
  std::vector<int> index(static_cast<std::size_t>(n), 0);
  Eigen::VectorXd p(n);
  std::size_t count = 0;
  while (true) {
    bool inside_safe = true;
    for (int i = 0; i < n; ++i) {
      p[i] = coordinate(i, index[static_cast<std::size_t>(i)]);
      const double lo = std::max(p[i] - g, state_space.lower[i]);
      const double hi = std::min(p[i] + g, state_space.upper[i]);
      if (lo < safe_set.lower[i] || hi > safe_set.upper[i]) inside_safe = false;
    }
    if (!inside_safe) {
      if (++count > max_points)
        throw ResourceError("discretization with mesh " + std::to_string(tau) + " exceeds the cap of " +
                            std::to_string(max_points) + " points");
      kept.insert(kept.end(), p.data(), p.data() + n);
    }
    int d = 0;
    while (d < n && ++index[static_cast<std::size_t>(d)] == per_axis[static_cast<std::size_t>(d)])
      index[static_cast<std::size_t>(d++)] = 0;
    if (d == n) break;
  }

  Discretization disc;
  disc.mesh = tau;
  disc.spacing = g;
  disc.points = Eigen::Map<Eigen::MatrixXd>(kept.data(), n, static_cast<Eigen::Index>(count));
  return disc;
}

std::size_t SuccessorStore::total() const {
  std::size_t t = 0;
  for (const auto& m : noise_) t += static_cast<std::size_t>(m.cols());
  return t;
}

void SuccessorStore::sample(std::size_t point, const SystemSpec& sys, const MlpNetwork& policy,
                            const Eigen::VectorXd& x, int samples, std::uint64_t seed) {
  require(point < noise_.size(), "successor store index out of range");
  require(samples >= 0, "sample count must be non-negative");
  std::mt19937_64 rng(seed);
  const Eigen::VectorXd u = forward(policy, x);
  auto& w = noise_[point];
  auto& s = successors_[point];
  const Eigen::Index old = w.cols();
  w.conservativeResize(sys.noise.dim(), old + samples);
  s.conservativeResize(sys.state_dim(), old + samples);
  for (int k = 0; k < samples; ++k) {
    w.col(old + k) = sys.noise.sample(rng);
    s.col(old + k) = apply_dynamics(sys, x, u, w.col(old + k));
  }
}

void SuccessorStore::refresh(const SystemSpec& sys, const MlpNetwork& policy, const Discretization& disc) {
  require(disc.size() == noise_.size(), "store and discretization differ in size");
  const Eigen::MatrixXd actions = forward_batch(policy, disc.points);
  for (std::size_t i = 0; i < noise_.size(); ++i) {
    if (noise_[i].cols() == 0) continue;
    const Eigen::VectorXd mean =
        sys.dynamics.A * disc.points.col(static_cast<Eigen::Index>(i)) + sys.dynamics.B * actions.col(static_cast<Eigen::Index>(i));
    Eigen::MatrixXd next = noise_[i].colwise() + mean;
    for (Eigen::Index k = 0; k < next.cols(); ++k) next.col(k) = clip_to_box(next.col(k), sys.state_space);
    successors_[i] = std::move(next);
  }
}

double compute_K(double lipschitz_f, double lipschitz_policy, double lipschitz_rsm) {
  return lipschitz_rsm * (lipschitz_f * (lipschitz_policy + 1.0) + 1.0);
}

double compute_K(double lipschitz_f, const MlpNetwork& policy, const MlpNetwork& rsm) {
  return compute_K(lipschitz_f, lipschitz_constant(policy), lipschitz_constant(rsm));
}

namespace {

// Partition of the noise support: per-cell offsets and probabilities.
struct NoiseCells {
  Eigen::MatrixXd lower;  // p x C
  Eigen::MatrixXd upper;  // p x C
  Eigen::VectorXd probability;

  NoiseCells(const NoiseModel& noise, int cells_per_axis) {
    const int p = noise.dim();
    std::vector<int> per_axis(static_cast<std::size_t>(p));
    Eigen::Index total = 1;
    for (int i = 0; i < p; ++i) {
      per_axis[static_cast<std::size_t>(i)] = noise.support.upper[i] > noise.support.lower[i] ? cells_per_axis : 1;
      total *= per_axis[static_cast<std::size_t>(i)];
    }
    lower.resize(p, total);
    upper.resize(p, total);
    probability.resize(total);
    std::vector<int> index(static_cast<std::size_t>(p), 0);
    for (Eigen::Index c = 0; c < total; ++c) {
      for (int i = 0; i < p; ++i) {
        const int k = index[static_cast<std::size_t>(i)];
        const int cells = per_axis[static_cast<std::size_t>(i)];
        const double lo = noise.support.lower[i];
        const double width = noise.support.upper[i] - lo;
        lower(i, c) = lo + width * k / cells;
        upper(i, c) = k + 1 == cells ? noise.support.upper[i] : lo + width * (k + 1) / cells;
      }
      probability[c] = noise.cell_probability(IntervalBox(lower.col(c), upper.col(c)));
      int d = 0;
      while (d < p && ++index[static_cast<std::size_t>(d)] == per_axis[static_cast<std::size_t>(d)])
        index[static_cast<std::size_t>(d++)] = 0;
    }
  }

  Eigen::Index count() const { return probability.size(); }
};

Eigen::MatrixXd clip_columns(Eigen::MatrixXd m, const IntervalBox& box) {
  m = m.cwiseMax(box.lower.replicate(1, m.cols()));
  return m.cwiseMin(box.upper.replicate(1, m.cols()));
}

// Expectation upper bounds for a batch of successor means (n x k), one per column.
Eigen::VectorXd expectation_bounds(const SystemSpec& sys, const MlpNetwork& rsm, const Eigen::MatrixXd& means,
                                   const NoiseCells& cells) {
  const Eigen::Index k = means.cols();
  const Eigen::Index c = cells.count();
  const Eigen::Index n = means.rows();
  Eigen::MatrixXd lo(n, k * c), hi(n, k * c);
  for (Eigen::Index j = 0; j < k; ++j) {
    lo.middleCols(j * c, c) = cells.lower.colwise() + means.col(j);
    hi.middleCols(j * c, c) = cells.upper.colwise() + means.col(j);
  }
  Eigen::MatrixXd out_lo, out_hi;
  interval_forward_batch(rsm, clip_columns(std::move(lo), sys.state_space), clip_columns(std::move(hi), sys.state_space),
                         out_lo, out_hi);
  Eigen::VectorXd bounds(k);
  for (Eigen::Index j = 0; j < k; ++j) bounds[j] = out_hi.row(0).segment(j * c, c).dot(cells.probability) + kBoundSlack;
  return bounds;
}

}  // namespace

double bound_expectation_upper(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                               const Eigen::VectorXd& x, int cells_per_axis) {
  require(cells_per_axis >= 1, "cells_per_axis must be at least 1");
  require(rsm.output_dim() == 1, "the certificate network must have a scalar output");
  require(x.size() == sys.state_dim(), "state dimension mismatch");
  const NoiseCells cells(sys.noise, cells_per_axis);
  const Eigen::VectorXd mean = sys.dynamics.A * x + sys.dynamics.B * forward(policy, x);
  return expectation_bounds(sys, rsm, mean, cells)[0];
}

VerifierReport check_all(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                         const Discretization& disc, const VerifierOptions& options) {
  require(options.cells_per_axis >= 1, "cells_per_axis must be at least 1");
  require(rsm.output_dim() == 1, "the certificate network must have a scalar output");
  require(disc.empty() || disc.points.rows() == sys.state_dim(), "discretization dimension mismatch");
  const auto start = std::chrono::steady_clock::now();

  VerifierReport report;
  report.lipschitz_rsm = lipschitz_constant(rsm);
  report.lipschitz_policy = lipschitz_constant(policy);
  report.lipschitz_dynamics = sys.dynamics.lipschitz;
  report.K = compute_K(report.lipschitz_dynamics, report.lipschitz_policy, report.lipschitz_rsm);
  report.tau = disc.mesh;
  report.cells_per_axis = options.cells_per_axis;
  report.checked_points = disc.size();
  const double slack = report.tau * report.K;

  const NoiseCells coarse(sys.noise, 1);
  const NoiseCells fine(sys.noise, options.cells_per_axis);
  constexpr std::size_t kChunk = 512;
  const std::size_t chunks = (disc.size() + kChunk - 1) / kChunk;
  std::vector<std::vector<Counterexample>> found(chunks);

  detail::parallel_for(chunks, options.threads, [&](std::size_t chunk) {
    const auto begin = static_cast<Eigen::Index>(chunk * kChunk);
    const auto len = static_cast<Eigen::Index>(std::min(kChunk, disc.size() - chunk * kChunk));
    const Eigen::MatrixXd xs = disc.points.middleCols(begin, len);
    const Eigen::MatrixXd means = sys.dynamics.A * xs + sys.dynamics.B * forward_batch(policy, xs);
    const Eigen::RowVectorXd values = forward_batch(rsm, xs).row(0);
    const Eigen::VectorXd first = expectation_bounds(sys, rsm, means, coarse);

    std::vector<Eigen::Index> open;
    for (Eigen::Index j = 0; j < len; ++j)
      if (!(first[j] < values[j] - slack)) open.push_back(j);
    if (open.empty()) return;

    Eigen::MatrixXd open_means(means.rows(), static_cast<Eigen::Index>(open.size()));
    for (std::size_t q = 0; q < open.size(); ++q) open_means.col(static_cast<Eigen::Index>(q)) = means.col(open[q]);
    const Eigen::VectorXd refined = expectation_bounds(sys, rsm, open_means, fine);
    for (std::size_t q = 0; q < open.size(); ++q) {
      const Eigen::Index j = open[q];
      const double bound = refined[static_cast<Eigen::Index>(q)];
      if (bound < values[j] - slack) continue;
      found[chunk].push_back({static_cast<std::size_t>(begin + j), xs.col(j), bound, values[j],
                              values[j] - slack - bound});
    }
  });

  for (auto& part : found)
    for (auto& cex : part) report.counterexamples.push_back(std::move(cex));
  report.certified = report.counterexamples.empty();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void harvest_counterexamples(const VerifierReport& report, SuccessorStore& store, const SystemSpec& sys,
                             const MlpNetwork& policy, int samples, std::uint64_t seed) {
  for (const auto& cex : report.counterexamples)
    store.sample(cex.index, sys, policy, cex.point, samples,
                 mix_seed(mix_seed(seed, cex.index), store.count(cex.index)));
}

std::string format_report(const VerifierReport& report) {
  nlohmann::json j;
  j["verdict"] = report.certified ? "certified" : "not_certified";
  j["K"] = report.K;
  j["L_V"] = report.lipschitz_rsm;
  j["L_pi"] = report.lipschitz_policy;
  j["L_f"] = report.lipschitz_dynamics;
  j["tau"] = report.tau;
  j["cells_per_axis"] = report.cells_per_axis;
  j["checked_points"] = report.checked_points;
  j["seconds"] = report.seconds;
  auto& list = j["counterexamples"] = nlohmann::json::array();
  for (const auto& c : report.counterexamples) {
    list.push_back({{"index", c.index},
                    {"point", std::vector<double>(c.point.data(), c.point.data() + c.point.size())},
                    {"expectation_bound", c.expectation_bound},
                    {"value", c.value},
                    {"margin", c.margin}});
  }
  return j.dump(2);
}

}  // namespace rsmcert
