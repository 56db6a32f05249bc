#include "cmac/optimizer.hpp"

#include <cmath>
#include <cstdlib>
#include <string>

namespace cmac {

OptimizerState::OptimizerState(std::span<Parameter* const> params, double lr, double mom)
    : learning_rate(lr), momentum(mom) {
  if (!(lr >= 0.0)) throw ContractError("optimizer: learning rate must be nonnegative");
  if (!(mom >= 0.0 && mom < 1.0)) throw ContractError("optimizer: momentum must lie in [0, 1)");
  velocity.reserve(params.size());
  for (const Parameter* p : params) velocity.emplace_back(p->value.shape());
}

void sgd_momentum_step(std::span<Parameter* const> params, OptimizerState& state) {
  if (params.size() != state.velocity.size()) {
    throw DimensionError("sgd_momentum_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(state.velocity.size()) + " velocity buffers");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& v = state.velocity[k];
    if (v.shape() != p.value.shape() || p.grad.shape() != p.value.shape()) {
      throw DimensionError("sgd_momentum_step: shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < v.numel(); ++i) {
      v[i] = state.momentum * v[i] - state.learning_rate * p.grad[i];
      p.value[i] += v[i];
    }
  }
}

double step_decay_lr(double base_lr, double decay_factor, int decay_every_epochs, int epoch) {
  if (decay_every_epochs <= 0) return base_lr;
  return base_lr * std::pow(decay_factor, epoch / decay_every_epochs);
}

}  // namespace cmac
