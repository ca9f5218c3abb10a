#pragma once

#include <cstdint>

#include "mapchange/params.hpp"

namespace mapchange {

struct OptimConfig {
  double base_lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 8;
  int total_iters = 1500;
  double poly_power = 0.9;
  int checkpoint_interval = 500;
  double change_threshold = 0.5;  // change is predicted where prob > threshold
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// base_lr * (1 - iter/total_iters)^poly_power; iter must be in [0, total].
double poly_lr(int iter, const OptimConfig& cfg);

// Classical momentum with coupled weight decay:
// g' = g + wd*w; v = m*v + g'; w = w - lr*v.
void sgd_step(Parameter& p, const Tensor& grad, double lr, const OptimConfig& cfg);

}  // namespace mapchange
