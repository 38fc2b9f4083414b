#include "rsmcert/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "rsmcert/error.hpp"
#include "rsmcert/verifier.hpp"

namespace rsmcert {

void PpoConfig::validate() const {
  require(episodes_per_iter > 0, "episodes_per_iter must be positive");
  require(horizon > 0, "PPO horizon must be positive");
  require(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
  require(clip_epsilon > 0.0, "clip epsilon must be positive");
  require(std_end > 0.0 && std_start >= std_end, "need std_start >= std_end > 0");
  require(std_decay_end_iter >= 1, "std_decay_end_iter must be at least 1");
  require(policy_epochs >= 0 && policy_epochs_first >= 0 && value_epochs >= 0 && value_epochs_first >= 0,
          "epoch counts must be non-negative");
  require(policy_learning_rate > 0.0 && value_learning_rate > 0.0, "learning rates must be positive");
  require(lipschitz_weight >= 0.0, "lipschitz weight must be non-negative");
  require(minibatch_size >= 0, "minibatch size must be non-negative");
}

double exploration_std(int iter, const PpoConfig& cfg) {
  require(iter >= 1, "PPO iterations are numbered from 1");
  if (cfg.std_decay_end_iter <= 1) return cfg.std_end;
  if (iter >= cfg.std_decay_end_iter) return cfg.std_end;
  const double slope = (cfg.std_start - cfg.std_end) / (cfg.std_decay_end_iter - 1);
  return std::max(cfg.std_end, cfg.std_start - (iter - 1) * slope);
}

double gaussian_log_prob(const Eigen::VectorXd& action, const Eigen::VectorXd& mean, double stddev) {
  const double z2 = ((action - mean) / stddev).squaredNorm();
  const auto m = static_cast<double>(action.size());
  return -0.5 * z2 - m * std::log(stddev) - 0.5 * m * std::log(2.0 * std::numbers::pi);
}

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    out[t] = acc;
  }
  return out;
}

void normalize_advantages(Eigen::VectorXd& advantages) {
  if (advantages.size() == 0) return;
  const double mean = advantages.mean();
  advantages.array() -= mean;
  const double stddev = std::sqrt(advantages.squaredNorm() / static_cast<double>(advantages.size()));
  advantages /= std::max(stddev, 1e-8);
}

RolloutBuffer collect_rollouts(const SystemSpec& sys, const MlpNetwork& policy, const MlpNetwork& value_net, int iter,
                               const PpoConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const double stddev = exploration_std(iter, cfg);
  const Eigen::Index total = static_cast<Eigen::Index>(cfg.episodes_per_iter) * cfg.horizon;
  RolloutBuffer buf;
  buf.stddev = stddev;
  buf.states.resize(sys.state_dim(), total);
  buf.actions.resize(sys.action_dim(), total);
  buf.log_probs.resize(total);
  buf.returns.resize(total);

  double reward_sum = 0.0;
  Eigen::Index col = 0;
  for (int ep = 0; ep < cfg.episodes_per_iter; ++ep) {
    const std::uint64_t ep_seed = mix_seed(mix_seed(seed, static_cast<std::uint64_t>(iter)), static_cast<std::uint64_t>(ep));
    std::mt19937_64 init_rng(ep_seed);
    const Eigen::VectorXd x0 = sys.sample_state(init_rng);
    const Trajectory traj = rollout(sys, policy, x0, cfg.horizon, stddev, mix_seed(ep_seed, 1));
    const std::vector<double> returns = discounted_returns(traj.rewards, cfg.gamma);
    for (int t = 0; t < cfg.horizon; ++t, ++col) {
      const auto ts = static_cast<std::size_t>(t);
      buf.states.col(col) = traj.states[ts];
      buf.actions.col(col) = traj.actions[ts];
      buf.returns[col] = returns[ts];
      reward_sum += traj.rewards[ts];
    }
  }
  const Eigen::MatrixXd means = forward_batch(policy, buf.states);
  for (Eigen::Index t = 0; t < total; ++t) buf.log_probs[t] = gaussian_log_prob(buf.actions.col(t), means.col(t), stddev);
  buf.advantages = buf.returns - forward_batch(value_net, buf.states).row(0).transpose();
  normalize_advantages(buf.advantages);
  buf.mean_episode_reward = reward_sum / cfg.episodes_per_iter;
  return buf;
}

double clipped_surrogate(double ratio, double advantage, double epsilon) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage);
}

namespace {

std::vector<std::vector<Eigen::Index>> make_batches(Eigen::Index total, int minibatch, std::mt19937_64& rng) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  if (minibatch <= 0 || minibatch >= total) return {order};
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Eigen::Index>> batches;
  for (Eigen::Index start = 0; start < total; start += minibatch) {
    const auto end = std::min<Eigen::Index>(start + minibatch, total);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(idx[i]);
  return out;
}

// Loss = -mean(surrogate) + lambda * max(L_pi - threshold, 0); returns mean surrogate.
double policy_step(MlpNetwork& policy, const RolloutBuffer& buf, const std::vector<Eigen::Index>& idx,
                   const PpoConfig& cfg, OptimizerState& opt) {
  const Eigen::MatrixXd states = gather(buf.states, idx);
  const Eigen::MatrixXd actions = gather(buf.actions, idx);
  const ForwardTrace trace = forward_trace(policy, states);
  const auto count = static_cast<double>(idx.size());
  const double var = buf.stddev * buf.stddev;
  Eigen::MatrixXd dmean = Eigen::MatrixXd::Zero(trace.output.rows(), trace.output.cols());
  double surrogate = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const double adv = buf.advantages[idx[i]];
    const double ratio =
        std::exp(gaussian_log_prob(actions.col(c), trace.output.col(c), buf.stddev) - buf.log_probs[idx[i]]);
    surrogate += clipped_surrogate(ratio, adv, cfg.clip_epsilon);
    const bool clipped = (adv >= 0.0 && ratio > 1.0 + cfg.clip_epsilon) || (adv < 0.0 && ratio < 1.0 - cfg.clip_epsilon);
    if (clipped) continue;
    // d(ratio)/d(mean) = ratio * (a - mean) / var
    dmean.col(c) = -(adv * ratio / count) * (actions.col(c) - trace.output.col(c)) / var;
  }
  GradientSet grads = GradientSet::zeros_like(policy);
  backward(policy, trace, dmean, grads);
  if (cfg.lipschitz_weight > 0.0 && lipschitz_constant(policy) > cfg.policy_lipschitz_threshold)
    accumulate_lipschitz_gradient(policy, cfg.lipschitz_weight, grads);
  optimizer_step(policy, grads, opt);
  return surrogate / count;
}

double value_step(MlpNetwork& value_net, const RolloutBuffer& buf, const std::vector<Eigen::Index>& idx,
                  OptimizerState& opt) {
  const Eigen::MatrixXd states = gather(buf.states, idx);
  const ForwardTrace trace = forward_trace(value_net, states);
  const auto count = static_cast<double>(idx.size());
  Eigen::MatrixXd dv(1, trace.output.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double err = trace.output(0, static_cast<Eigen::Index>(i)) - buf.returns[idx[i]];
    loss += err * err;
    dv(0, static_cast<Eigen::Index>(i)) = 2.0 * err / count;
  }
  GradientSet grads = GradientSet::zeros_like(value_net);
  backward(value_net, trace, dv, grads);
  optimizer_step(value_net, grads, opt);
  return loss / count;
}

}  // namespace

PpoUpdateStats ppo_update(MlpNetwork& policy, MlpNetwork& value_net, const RolloutBuffer& buffer, int iter,
                          const PpoConfig& cfg, OptimizerState& policy_opt, OptimizerState& value_opt,
                          std::uint64_t seed) {
  require(buffer.size() > 0, "PPO update needs a non-empty buffer");
  require(buffer.stddev > 0.0, "buffer was collected without exploration noise");
  PpoUpdateStats stats;
  stats.policy_epochs = iter == 1 ? cfg.policy_epochs_first : cfg.policy_epochs;
  stats.value_epochs = iter == 1 ? cfg.value_epochs_first : cfg.value_epochs;
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(iter)));
  for (int e = 0; e < stats.policy_epochs; ++e) {
    const auto batches = make_batches(buffer.size(), cfg.minibatch_size, rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double s = policy_step(policy, buffer, batches[b], cfg, policy_opt);
      if (e == 0 && b == 0) stats.initial_surrogate = s;
    }
  }
  for (int e = 0; e < stats.value_epochs; ++e)
    for (const auto& batch : make_batches(buffer.size(), cfg.minibatch_size, rng))
      stats.final_value_loss = value_step(value_net, buffer, batch, value_opt);
  return stats;
}

PretrainResult pretrain(const SystemSpec& sys, MlpNetwork policy, int num_iterations, const PpoConfig& cfg,
                        std::uint64_t seed, const PretrainCallback& on_iteration) {
  require(num_iterations >= 0, "number of PPO iterations must be non-negative");
  require(policy.input_dim() == sys.state_dim() && policy.output_dim() == sys.action_dim(),
          "policy shape does not match the system");
  cfg.validate();
  PretrainResult result;
  if (num_iterations == 0) {
    result.policy = std::move(policy);
    return result;
  }
  std::vector<int> value_dims{sys.state_dim()};
  value_dims.insert(value_dims.end(), cfg.value_hidden.begin(), cfg.value_hidden.end());
  value_dims.push_back(1);
  MlpNetwork value_net = MlpNetwork::random(value_dims, Activation::identity, mix_seed(seed, 0x76616c));
  OptimizerState policy_opt(policy, {cfg.policy_learning_rate});
  OptimizerState value_opt(value_net, {cfg.value_learning_rate});

  for (int iter = 1; iter <= num_iterations; ++iter) {
    const RolloutBuffer buf = collect_rollouts(sys, policy, value_net, iter, cfg, seed);
    const PpoUpdateStats stats = ppo_update(policy, value_net, buf, iter, cfg, policy_opt, value_opt, seed);
    result.log.push_back({iter, buf.mean_episode_reward, buf.stddev, lipschitz_constant(policy), stats.policy_epochs,
                          stats.value_epochs});
    if (on_iteration) on_iteration(iter, policy);
  }
  result.policy = std::move(policy);
  return result;
}

std::string training_curve_csv(const std::vector<PpoIterationLog>& log) {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,mean_reward,std,lipschitz_policy,policy_epochs,value_epochs\n";
  for (const auto& row : log)
    out << row.iteration << ',' << row.mean_reward << ',' << row.stddev << ',' << row.policy_lipschitz << ','
        << row.policy_epochs << ',' << row.value_epochs << '\n';
  return out.str();
}

}  // namespace rsmcert
