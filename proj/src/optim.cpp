// SPDX-License-Identifier: Apache-2.0

#include "moekit/optim.hpp"

#include <cmath>

namespace moekit {

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig config)
    : config_(config) {
  slots_.reserve(params.size());
  for (Tensor& p : params) {
    Slot s;
    s.m.assign(p.size(), 0.0);
    s.v.assign(p.size(), 0.0);
    s.param = std::move(p);
    slots_.push_back(std::move(s));
  }
}

void AdamOptimizer::zero_grad() {
  for (Slot& s : slots_) s.param.zero_grad();
}

void AdamOptimizer::step(double lr) {
  ++step_count_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (Slot& s : slots_) {
    auto values = s.param.values_mut();
    auto grad = s.param.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      double g = grad[i];
      if (config_.weight_decay != 0.0) g += config_.weight_decay * values[i];
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
      const double mh = s.m[i] / bias1;
      const double vh = s.v[i] / bias2;
      values[i] -= lr * mh / (std::sqrt(vh) + config_.eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  constexpr double kPi = 3.14159265358979323846;
  return base_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

}  // namespace moekit
