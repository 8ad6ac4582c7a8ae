#include "dmx/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dmx {

OptimizerState make_optimizer(const std::vector<const Tensor*>& params, float base_lr,
                              float momentum, float weight_decay, float power, int max_iter) {
  if (max_iter <= 0) throw std::invalid_argument("optimizer: max_iter must be positive");
  OptimizerState s;
  s.base_lr = base_lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  s.power = power;
  s.max_iter = max_iter;
  s.velocity.reserve(params.size());
  for (const Tensor* p : params) s.velocity.emplace_back(p->shape);
  return s;
}

float poly_lr(int iter, const OptimizerState& state) {
  if (iter < 0 || iter > state.max_iter)
    throw std::invalid_argument("poly_lr: iter outside [0, max_iter]");
  const double frac = 1.0 - static_cast<double>(iter) / state.max_iter;
  return static_cast<float>(state.base_lr * std::pow(frac, state.power));
}

void sgd_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
              OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.velocity.size())
    throw std::invalid_argument("sgd_step: parameter/gradient/velocity count mismatch");
  if (state.iter >= state.max_iter)
    throw std::logic_error("sgd_step: optimizer exhausted (iter == max_iter)");
  const float lr = poly_lr(state.iter, state);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& v = state.velocity[i];
    if (!p.same_shape(g) || !p.same_shape(v))
      throw std::invalid_argument("sgd_step: shape mismatch at parameter " + std::to_string(i));
    for (std::size_t j = 0; j < p.numel(); ++j) {
      v.data[j] = state.momentum * v.data[j] + g.data[j] + state.weight_decay * p.data[j];
      p.data[j] -= lr * v.data[j];
    }
  }
  ++state.iter;
}

}  // namespace dmx
