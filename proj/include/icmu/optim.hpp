#pragma once

#include <string>
#include <vector>

#include "icmu/tensor.hpp"

namespace icmu {

// A named learnable tensor plus its Adam accumulators.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  long step_count = 0;

  Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
    adam_m.assign(tensor.values().size(), 0.0);
    adam_v.assign(tensor.values().size(), 0.0);
  }

  std::vector<double>& values() { return tensor.values(); }
  const std::vector<double>& grad() const { return tensor.grad(); }
  void zero_grad() { tensor.zero_grad(); }
};

// Standard Adam with bias correction. Every parameter must carry a gradient
// buffer (zero_grad() allocates one); a missing buffer is a caller bug.
void adam_step(const std::vector<Parameter*>& params, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// Linear warmup from 0 to base_lr over the first warmup_fraction of steps,
// then linear decay to 0 at total_steps.
double lr_at(long step, long total_steps, double base_lr, double warmup_fraction = 0.1);

}  // namespace icmu
