#pragma once

#include <span>
#include <vector>

#include "cmac/tape.hpp"

namespace cmac {

// Momentum SGD: v <- momentum * v - lr * g;  p <- p + v.
struct OptimizerState {
  std::vector<Tensor> velocity;
  double learning_rate = 0.001;
  double momentum = 0.9;

  OptimizerState() = default;
  OptimizerState(std::span<Parameter* const> params, double lr, double momentum);
};

void sgd_momentum_step(std::span<Parameter* const> params, OptimizerState& state);

// Learning rate for a 0-based epoch under step decay.
double step_decay_lr(double base_lr, double decay_factor, int decay_every_epochs, int epoch);

}  // namespace cmac
