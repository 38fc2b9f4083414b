#include "rsmcert/optimizer.hpp"

#include <cmath>

#include "rsmcert/error.hpp"

namespace rsmcert {

OptimizerState::OptimizerState(const MlpNetwork& net, AdamConfig cfg)
    : config(cfg), first_moment(GradientSet::zeros_like(net)), second_moment(GradientSet::zeros_like(net)) {
  require(cfg.learning_rate > 0.0, "learning rate must be positive");
}

namespace {

template <typename Param, typename Moment>
void adam_update(Param& param, const Moment& grad, Moment& m, Moment& v, const AdamConfig& cfg, double c1,
                 double c2) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  param.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
}

}  // namespace

void optimizer_step(MlpNetwork& net, const GradientSet& grads, OptimizerState& state) {
  require(grads.congruent_with(net), "gradient set is not shape-congruent with the network");
  require(state.first_moment.congruent_with(net) && state.second_moment.congruent_with(net),
          "optimizer state is not shape-congruent with the network");
  require(grads.all_finite(), "non-finite gradient");
  ++state.step;
  const auto& cfg = state.config;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& layer = net.layer(l);
    adam_update(layer.weight, grads.weight[l], state.first_moment.weight[l], state.second_moment.weight[l], cfg, c1,
                c2);
    adam_update(layer.bias, grads.bias[l], state.first_moment.bias[l], state.second_moment.bias[l], cfg, c1, c2);
  }
  require(net.all_finite(), "optimizer step produced non-finite parameters");
}

}  // namespace rsmcert
