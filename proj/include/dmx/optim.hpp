#pragma once

#include <vector>

#include "dmx/tensor.hpp"

namespace dmx {

// SGD with momentum, weight decay and polynomial lr annealing:
//   lr(t) = base_lr * (1 - t/max_iter)^power
//   v <- momentum*v + g + weight_decay*p;  p <- p - lr*v
struct OptimizerState {
  float base_lr = 2.5e-4f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  float power = 0.9f;
  int max_iter = 1;
  int iter = 0;
  std::vector<Tensor> velocity;
};

OptimizerState make_optimizer(const std::vector<const Tensor*>& params, float base_lr,
                              float momentum, float weight_decay, float power, int max_iter);

float poly_lr(int iter, const OptimizerState& state);

void sgd_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              OptimizerState& state);

}  // namespace dmx
