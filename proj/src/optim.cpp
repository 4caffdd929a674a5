#include "icmu/optim.hpp"

#include <cmath>

namespace icmu {

void adam_step(const std::vector<Parameter*>& params, double lr, double beta1, double beta2,
               double eps) {
  for (Parameter* p : params) {
    if (!p->tensor.has_grad()) {
      throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
    }
    const std::vector<double>& g = p->tensor.grad();
    p->step_count += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p->step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p->step_count));
    std::vector<double>& w = p->values();
    for (size_t i = 0; i < w.size(); ++i) {
      p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g[i];
      p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g[i] * g[i];
      const double m_hat = p->adam_m[i] / bc1;
      const double v_hat = p->adam_v[i] / bc2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double lr_at(long step, long total_steps, double base_lr, double warmup_fraction) {
  if (step < 0 || step > total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0," +
                        std::to_string(total_steps) + "]");
  }
  const double warmup_steps = warmup_fraction * static_cast<double>(total_steps);
  if (static_cast<double>(step) <= warmup_steps) {
    if (warmup_steps <= 0.0) return base_lr;
    return base_lr * static_cast<double>(step) / warmup_steps;
  }
  const double decay_span = static_cast<double>(total_steps) - warmup_steps;
  return base_lr * (static_cast<double>(total_steps) - static_cast<double>(step)) / decay_span;
}

}  // namespace icmu
