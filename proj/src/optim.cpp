#include "mapchange/optim.hpp"

#include <cmath>

#include "mapchange/errors.hpp"

namespace mapchange {

void OptimConfig::validate() const {
  if (base_lr <= 0) throw ConfigError("base_lr must be > 0");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (total_iters < 1) throw ConfigError("total_iters must be >= 1");
  if (poly_power <= 0) throw ConfigError("poly_power must be > 0");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
  if (change_threshold < 0 || change_threshold > 1)
    throw ConfigError("change_threshold must be in [0,1]");
}

double poly_lr(int iter, const OptimConfig& cfg) {
  if (iter < 0 || iter > cfg.total_iters)
    throw ConfigError("poly_lr: iteration " + std::to_string(iter) + " outside [0," +
                      std::to_string(cfg.total_iters) + "]");
  double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.total_iters);
  return cfg.base_lr * std::pow(frac, cfg.poly_power);
}

void sgd_step(Parameter& p, const Tensor& grad, double lr, const OptimConfig& cfg) {
  if (!grad.same_shape(p.value))
    throw ConfigError("sgd_step: gradient " + grad.shape_str() + " does not match parameter " +
                      p.name + " " + p.value.shape_str());
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    double g = grad[i] + cfg.weight_decay * p.value[i];
    p.velocity[i] = cfg.momentum * p.velocity[i] + g;
    p.value[i] -= lr * p.velocity[i];
  }
}

}  // namespace mapchange
