#include "rsmcert/learner.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "rsmcert/error.hpp"

namespace rsmcert {

void LearnerConfig::validate() const {
  require(tau > 0.0, "tau must be positive");
  require(samples_per_point > 0, "samples_per_point must be positive");
  require(lambda >= 0.0, "lambda must be non-negative");
  require(delta > 0.0, "delta must be positive");
  require(epochs_per_call >= 0 && pretrain_epochs >= 0, "epoch budgets must be non-negative");
  require(minibatch_size > 0, "minibatch size must be positive");
  require(rsm_learning_rate > 0.0 && policy_learning_rate > 0.0, "learning rates must be positive");
  require(max_loop_iters >= 1, "max_loop_iters must be at least 1");
  require(timeout_seconds > 0.0, "timeout must be positive");
  require(cells_per_axis >= 1, "cells_per_axis must be at least 1");
  require(closedness_splits >= 1, "closedness_splits must be at least 1");
  require(train_tau_factor >= 1.0, "train_tau_factor must be at least 1");
}

double rsm_hinge_loss(const Eigen::VectorXd& mean_successor_values, const Eigen::VectorXd& values, double tau_k) {
  require(mean_successor_values.size() == values.size(), "hinge inputs differ in length");
  if (values.size() == 0) return 0.0;
  return (mean_successor_values - values).array().unaryExpr([tau_k](double d) { return std::max(d + tau_k, 0.0); }).sum() /
         static_cast<double>(values.size());
}

double lipschitz_loss(const MlpNetwork& policy, const MlpNetwork& rsm, double tau, double lipschitz_f, double delta) {
  require(tau > 0.0 && lipschitz_f > 0.0 && delta > 0.0, "tau, L_f and delta must be positive");
  const double threshold = delta / (tau * (lipschitz_f * (lipschitz_constant(policy) + 1.0) + 1.0));
  return std::max(lipschitz_constant(rsm) - threshold, 0.0);
}

namespace {

struct HingeSum {
  double sum = 0.0;
  Eigen::Index active = 0;
};

// Sum over `indices` of the hinge terms (not yet divided by |indices|), with optional
// gradients of (sum / |indices|) for fixed tau_k.
HingeSum hinge_sum(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm, const Discretization& disc,
                   const SuccessorStore& store, const std::vector<std::size_t>& indices, double tau_k,
                   GradientSet* rsm_grads, GradientSet* policy_grads) {
  const auto k = static_cast<Eigen::Index>(indices.size());
  if (k == 0) return {};
  const int n = sys.state_dim();
  Eigen::MatrixXd xs(n, k);
  Eigen::Index total = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    xs.col(i) = disc.points.col(static_cast<Eigen::Index>(indices[static_cast<std::size_t>(i)]));
    total += static_cast<Eigen::Index>(store.count(indices[static_cast<std::size_t>(i)]));
  }
  if (total == 0) return {};

  ForwardTrace policy_trace;
  Eigen::MatrixXd actions;
  if (policy_grads) {
    policy_trace = forward_trace(policy, xs);
    actions = policy_trace.output;
  } else {
    actions = forward_batch(policy, xs);
  }
  const Eigen::MatrixXd means = sys.dynamics.A * xs + sys.dynamics.B * actions;

  Eigen::MatrixXd succ(n, total);
  Eigen::MatrixXd inside(n, total);  // derivative of the clip
  std::vector<Eigen::Index> offset(static_cast<std::size_t>(k) + 1, 0);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::MatrixXd& w = store.noise(indices[static_cast<std::size_t>(i)]);
    const Eigen::Index start = offset[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      const Eigen::VectorXd pre = means.col(i) + w.col(c);
      for (int d = 0; d < n; ++d) {
        const double lo = sys.state_space.lower[d];
        const double hi = sys.state_space.upper[d];
        succ(d, start + c) = std::clamp(pre[d], lo, hi);
        inside(d, start + c) = (pre[d] > lo && pre[d] < hi) ? 1.0 : 0.0;
      }
    }
    offset[static_cast<std::size_t>(i) + 1] = start + w.cols();
  }

  const bool want_grads = rsm_grads != nullptr;
  ForwardTrace succ_trace, point_trace;
  Eigen::RowVectorXd succ_values, point_values;
  if (want_grads) {
    succ_trace = forward_trace(rsm, succ);
    point_trace = forward_trace(rsm, xs);
    succ_values = succ_trace.output.row(0);
    point_values = point_trace.output.row(0);
  } else {
    succ_values = forward_batch(rsm, succ).row(0);
    point_values = forward_batch(rsm, xs).row(0);
  }

  double sum = 0.0;
  Eigen::Index active = 0;
  Eigen::MatrixXd d_succ = Eigen::MatrixXd::Zero(1, total);
  Eigen::MatrixXd d_point = Eigen::MatrixXd::Zero(1, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index start = offset[static_cast<std::size_t>(i)];
    const Eigen::Index cnt = offset[static_cast<std::size_t>(i) + 1] - start;
    if (cnt == 0) continue;
    const double term = succ_values.segment(start, cnt).mean() - point_values[i] + tau_k;
    if (term <= 0.0) continue;
    sum += term;
    ++active;
    d_succ.middleCols(start, cnt).setConstant(1.0 / (static_cast<double>(k) * static_cast<double>(cnt)));
    d_point(0, i) = -1.0 / static_cast<double>(k);
  }

  if (want_grads && sum > 0.0) {
    const Eigen::MatrixXd d_x = backward(rsm, succ_trace, d_succ, *rsm_grads);
    backward(rsm, point_trace, d_point, *rsm_grads);
    if (policy_grads) {
      const Eigen::MatrixXd d_pre = d_x.cwiseProduct(inside);
      Eigen::MatrixXd d_mean(n, k);
      for (Eigen::Index i = 0; i < k; ++i) {
        const Eigen::Index start = offset[static_cast<std::size_t>(i)];
        const Eigen::Index cnt = offset[static_cast<std::size_t>(i) + 1] - start;
        d_mean.col(i) = cnt > 0 ? Eigen::VectorXd(d_pre.middleCols(start, cnt).rowwise().sum()) : Eigen::VectorXd::Zero(n);
      }
      backward(policy, policy_trace, sys.dynamics.B.transpose() * d_mean, *policy_grads);
    }
  }
  return {sum, active};
}

}  // namespace

double rsm_loss(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm, const Discretization& disc,
                const SuccessorStore& store, double tau, double K) {
  require(store.num_points() == disc.size(), "store and discretization differ in size");
  if (disc.empty()) return 0.0;
  constexpr std::size_t kChunk = 1024;
  double sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < disc.size(); start += kChunk) {
    idx.resize(std::min(kChunk, disc.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    sum += hinge_sum(sys, policy, rsm, disc, store, idx, tau * K, nullptr, nullptr).sum;
  }
  return sum / static_cast<double>(disc.size());
}

LossBreakdown loss_and_gradients(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& rsm,
                                 const Discretization& disc, const SuccessorStore& store,
                                 const std::vector<std::size_t>& indices, double tau, double lambda, double delta,
                                 bool differentiate_k, GradientSet& rsm_grads, GradientSet* policy_grads) {
  require(rsm_grads.congruent_with(rsm), "certificate gradient set has the wrong shape");
  require(!policy_grads || policy_grads->congruent_with(policy), "policy gradient set has the wrong shape");
  const double lf = sys.dynamics.lipschitz;
  const double lp = lipschitz_constant(policy);
  const double lv = lipschitz_constant(rsm);
  const double c = lf * (lp + 1.0) + 1.0;
  const double K = lv * c;

  LossBreakdown out;
  out.lambda = lambda;
  const HingeSum h = hinge_sum(sys, policy, rsm, disc, store, indices, tau * K, &rsm_grads, policy_grads);
  out.rsm_loss = indices.empty() ? 0.0 : h.sum / static_cast<double>(indices.size());
  if (differentiate_k && h.active > 0) {
    // d(tau K) / d L_V = tau c,  d(tau K) / d L_pi = tau L_V L_f.
    const double share = static_cast<double>(h.active) / static_cast<double>(indices.size());
    accumulate_lipschitz_gradient(rsm, share * tau * c, rsm_grads);
    if (policy_grads) accumulate_lipschitz_gradient(policy, share * tau * lv * lf, *policy_grads);
  }

  const double threshold = delta / (tau * c);
  out.lipschitz_loss = std::max(lv - threshold, 0.0);
  if (out.lipschitz_loss > 0.0 && lambda > 0.0) {
    accumulate_lipschitz_gradient(rsm, lambda, rsm_grads);
    if (policy_grads) accumulate_lipschitz_gradient(policy, lambda * delta * lf / (tau * c * c), *policy_grads);
  }
  out.total = out.rsm_loss + lambda * out.lipschitz_loss;
  return out;
}

LearnerState::LearnerState(const MlpNetwork& policy, const MlpNetwork& rsm, const LearnerConfig& cfg,
                           std::uint64_t seed)
    : rsm_opt(rsm, {cfg.rsm_learning_rate}), policy_opt(policy, {cfg.policy_learning_rate}), rng(seed) {}

LossBreakdown train_epoch(const SystemSpec& sys, MlpNetwork& policy, MlpNetwork& rsm, const Discretization& disc,
                          SuccessorStore& store, const LearnerConfig& cfg, bool policy_trainable,
                          LearnerState& state) {
  require(store.num_points() == disc.size(), "store and discretization differ in size");
  LossBreakdown avg;
  avg.lambda = cfg.lambda;
  if (disc.empty()) return avg;
  std::vector<std::size_t> order(disc.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), state.rng);

  GradientSet rsm_grads = GradientSet::zeros_like(rsm);
  GradientSet policy_grads = GradientSet::zeros_like(policy);
  const auto batch = static_cast<std::size_t>(cfg.minibatch_size);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
               order.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch, order.size())));
    rsm_grads.set_zero();
    policy_grads.set_zero();
    const LossBreakdown loss = loss_and_gradients(sys, policy, rsm, disc, store, idx, cfg.tau * cfg.train_tau_factor,
                                                  cfg.lambda, cfg.delta, cfg.differentiate_k, rsm_grads, policy_trainable ? &policy_grads : nullptr);
    optimizer_step(rsm, rsm_grads, state.rsm_opt);
    if (policy_trainable) optimizer_step(policy, policy_grads, state.policy_opt);
    const double w = static_cast<double>(idx.size()) / static_cast<double>(order.size());
    avg.rsm_loss += w * loss.rsm_loss;
    avg.lipschitz_loss += w * loss.lipschitz_loss;
  }
  avg.total = avg.rsm_loss + avg.lambda * avg.lipschitz_loss;
  if (policy_trainable) store.refresh(sys, policy, disc);
  return avg;
}

std::vector<LossBreakdown> pretrain_rsm(const SystemSpec& sys, const MlpNetwork& policy, MlpNetwork& rsm,
                                        const Discretization& disc, SuccessorStore& store, const LearnerConfig& cfg,
                                        int epochs, LearnerState& state) {
  std::vector<LossBreakdown> out;
  MlpNetwork frozen = policy;
  for (int e = 0; e < epochs; ++e) out.push_back(train_epoch(sys, frozen, rsm, disc, store, cfg, false, state));
  return out;
}

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::stable: return "stable";
    case Outcome::unknown: return "unknown";
    case Outcome::precondition_failed: return "precondition_failed";
  }
  return "unknown";
}

Outcome outcome_from_string(const std::string& text) {
  if (text == "stable") return Outcome::stable;
  if (text == "unknown") return Outcome::unknown;
  if (text == "precondition_failed") return Outcome::precondition_failed;
  throw ContractViolation("unknown outcome '" + text + "'");
}

MlpNetwork initial_policy(const SystemSpec& sys, const std::vector<int>& hidden, std::uint64_t seed) {
  std::vector<int> dims{sys.state_dim()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(sys.action_dim());
  return MlpNetwork::random(dims, Activation::identity, mix_seed(seed, 0x706f6c));
}

MlpNetwork initial_rsm(const SystemSpec& sys, const std::vector<int>& hidden, std::uint64_t seed) {
  std::vector<int> dims{sys.state_dim()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(1);
  return MlpNetwork::random(dims, Activation::softplus, mix_seed(seed, 0x72736d));
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string format_verdict(const RunVerdict& verdict) {
  nlohmann::json j;
  j["outcome"] = to_string(verdict.outcome);
  j["iterations"] = verdict.iterations;
  j["seconds"] = verdict.seconds;
  j["certified"] = verdict.final_report.certified;
  j["counterexamples"] = verdict.final_report.counterexamples.size();
  j["K"] = verdict.final_report.K;
  j["initial_policy_hash"] = verdict.initial_policy_hash;
  j["final_policy_hash"] = verdict.policy.parameter_hash();
  if (!verdict.message.empty()) j["message"] = verdict.message;
  return j.dump(2);
}

std::string loss_curve_csv(const std::vector<LossRecord>& losses) {
  std::ostringstream out;
  out.precision(17);
  out << "loop_iteration,epoch,rsm_loss,lipschitz_loss,total\n";
  for (const auto& r : losses)
    out << r.loop_iteration << ',' << r.epoch << ',' << r.loss.rsm_loss << ',' << r.loss.lipschitz_loss << ','
        << r.loss.total << '\n';
  return out.str();
}

RunVerdict learn_certificate(const SystemSpec& sys, MlpNetwork policy, const LearnerConfig& cfg, std::uint64_t seed,
                             const std::optional<std::filesystem::path>& run_dir,
                             std::optional<MlpNetwork> rsm_init) {
  cfg.validate();
  sys.validate();
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };
  if (run_dir) std::filesystem::create_directories(*run_dir);

  RunVerdict verdict;
  verdict.initial_policy_hash = policy.parameter_hash();
  auto finish = [&](RunVerdict& v) -> RunVerdict {
    v.seconds = elapsed();
    if (run_dir) {
      save_network(v.policy, *run_dir / "policy.net");
      save_network(v.rsm, *run_dir / "rsm.net");
      write_text(*run_dir / "loss.csv", loss_curve_csv(v.losses));
      write_text(*run_dir / "report.json", format_report(v.final_report));
      write_text(*run_dir / "verdict.json", format_verdict(v));
    }
    return std::move(v);
  };

  MlpNetwork rsm = rsm_init ? std::move(*rsm_init) : initial_rsm(sys, cfg.rsm_hidden, seed);
  require(rsm.input_dim() == sys.state_dim() && rsm.output_dim() == 1, "certificate network has the wrong shape");

  const ClosednessResult closed = check_closed_under_dynamics(sys, policy, cfg.closedness_splits);
  if (!closed.closed) {
    verdict.outcome = Outcome::precondition_failed;
    verdict.message = "safe set is not closed under the dynamics of the initial policy";
    verdict.policy = std::move(policy);
    verdict.rsm = std::move(rsm);
    return finish(verdict);
  }

  const Discretization disc = build_discretization(sys.state_space, sys.safe_set, cfg.tau, cfg.max_grid_points);
  SuccessorStore store(disc.size());
  for (std::size_t i = 0; i < disc.size(); ++i)
    store.sample(i, sys, policy, disc.points.col(static_cast<Eigen::Index>(i)), cfg.samples_per_point,
                 mix_seed(mix_seed(seed, 0x73756363), i));

  LearnerState state(policy, rsm, cfg, mix_seed(seed, 0x6c726e));
  const VerifierOptions vopts{cfg.cells_per_axis, cfg.threads};
  int epoch = 0;
  for (int e = 0; e < cfg.pretrain_epochs && elapsed() < cfg.timeout_seconds; ++e) {
    MlpNetwork frozen = policy;
    verdict.losses.push_back({0, epoch++, train_epoch(sys, frozen, rsm, disc, store, cfg, false, state)});
  }

  auto report = [&](const std::string& line) {
    if (cfg.progress) cfg.progress(line);
  };
  report("grid " + std::to_string(disc.size()) + " points, certificate pre-training done at " +
         std::to_string(elapsed()) + " s");

  for (int it = 1; it <= cfg.max_loop_iters; ++it) {
    verdict.final_report = check_all(sys, policy, rsm, disc, vopts);
    verdict.iterations = it;
    {
      std::ostringstream msg;
      msg << "loop " << it << ": " << verdict.final_report.counterexamples.size() << " counterexamples, K "
          << verdict.final_report.K << ", L_V " << verdict.final_report.lipschitz_rsm << ", L_pi "
          << verdict.final_report.lipschitz_policy << ", " << elapsed() << " s";
      report(msg.str());
    }
    if (run_dir) {
      save_network(policy, *run_dir / ("policy_iter" + std::to_string(it) + ".net"));
      save_network(rsm, *run_dir / ("rsm_iter" + std::to_string(it) + ".net"));
    }
    if (verdict.final_report.certified) {
      if (cfg.policy_trainable && !check_closed_under_dynamics(sys, policy, cfg.closedness_splits).closed) {
        verdict.outcome = Outcome::unknown;
        verdict.message = "decrease condition holds but the trained policy no longer keeps the safe set closed";
      } else {
        verdict.outcome = Outcome::stable;
      }
      break;
    }
    if (it == cfg.max_loop_iters || elapsed() >= cfg.timeout_seconds) break;

    harvest_counterexamples(verdict.final_report, store, sys, policy, cfg.samples_per_point,
                            mix_seed(seed, static_cast<std::uint64_t>(it)));
    for (int e = 0; e < cfg.epochs_per_call && elapsed() < cfg.timeout_seconds; ++e)
      verdict.losses.push_back({it, epoch++, train_epoch(sys, policy, rsm, disc, store, cfg, cfg.policy_trainable, state)});
    verdict.policy_hashes.push_back(policy.parameter_hash());
  }
  if (verdict.outcome != Outcome::stable && verdict.message.empty())
    verdict.message = elapsed() >= cfg.timeout_seconds ? "timeout reached" : "loop iteration budget exhausted";
  verdict.policy = std::move(policy);
  verdict.rsm = std::move(rsm);
  return finish(verdict);
}

PretrainResult pretrain_policy(const SystemSpec& sys, const AlgorithmConfig& cfg, std::uint64_t seed,
                               const PretrainCallback& on_iteration) {
  MlpNetwork policy = initial_policy(sys, cfg.policy_hidden, seed);
  return pretrain(sys, std::move(policy), cfg.ppo_iterations, cfg.ppo, mix_seed(seed, 0x70706f), on_iteration);
}

RunVerdict run_algorithm(const SystemSpec& sys, const AlgorithmConfig& cfg, std::uint64_t seed,
                         const std::optional<std::filesystem::path>& run_dir) {
  PretrainResult pre = pretrain_policy(sys, cfg, seed);
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    save_network(pre.policy, *run_dir / "policy_pretrained.net");
    write_text(*run_dir / "ppo_curve.csv", training_curve_csv(pre.log));
  }
  return learn_certificate(sys, std::move(pre.policy), cfg.learner, seed, run_dir);
}

}  // namespace rsmcert
