#pragma once

#include <cstdint>

#include "rsmcert/nn.hpp"

namespace rsmcert {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators for one network. Shapes mirror the network's parameters.
struct OptimizerState {
  AdamConfig config;
  GradientSet first_moment;
  GradientSet second_moment;
  std::int64_t step = 0;

  OptimizerState() = default;
  OptimizerState(const MlpNetwork& net, AdamConfig cfg);
};

/// One Adam descent step. Throws ContractViolation on shape mismatch or if the update
/// would leave a non-finite parameter behind.
void optimizer_step(MlpNetwork& net, const GradientSet& grads, OptimizerState& state);

}  // namespace rsmcert
