// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam over an explicit trainable set. Moment buffers exist only for the
/// tensors handed in.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig config = {});

  void zero_grad();
  /// One update using the given learning rate; reads each tensor's grad.
  void step(double lr);

  std::size_t num_slots() const { return slots_.size(); }
  std::size_t step_count() const { return step_count_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Slot> slots_;
  AdamConfig config_;
  std::size_t step_count_ = 0;
};

/// Cosine decay from base_lr at step 0 to 0 at total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

}  // namespace moekit
