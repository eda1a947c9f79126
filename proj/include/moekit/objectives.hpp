// SPDX-License-Identifier: Apache-2.0
//
// Training objective: masked auto-regressive loss, the differentiable load
// balancing loss, and their weighted combination.

#pragma once

#include <cstdint>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

struct LossReport {
  double regressive = 0.0;
  std::vector<double> aux_per_layer;
  double total = 0.0;
  double alpha = 0.0;
};

/// Mean negative log-likelihood over the masked prediction rows:
/// logits row j is scored against next_ids[j] wherever predict_mask[j] is
/// set. The caller supplies shift-by-one aligned targets. Throws when the
/// mask is empty (undefined mean).
Tensor autoregressive_loss(const Tensor& logits, const std::vector<int>& next_ids,
                           const std::vector<std::uint8_t>& predict_mask);

/// Load balancing loss E * sum_i F_i * G_i over a [K x E] gate matrix.
/// F_i is the fraction of tokens whose top-1 gate is expert i (piecewise
/// constant, no gradient); G_i is the mean gate probability of expert i
/// (the differentiable path).
Tensor aux_loss(const Tensor& probs, const std::vector<std::size_t>& top1);

/// Alternative counting: every one of the k assignments contributes to F,
/// normalized by K*k so that a balanced assignment still scores 1.
Tensor aux_loss_all_assignments(const Tensor& probs,
                                const std::vector<std::vector<std::size_t>>& assignments);

struct TotalLoss {
  Tensor total;
  LossReport report;
};

/// total = regressive + alpha * mean(aux_per_layer); the mean keeps alpha
/// independent of model depth. An empty aux list leaves the regressive loss
/// untouched.
TotalLoss total_loss(const Tensor& regressive, const std::vector<Tensor>& aux_per_layer,
                     double alpha);

}  // namespace moekit
