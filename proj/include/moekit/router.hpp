// SPDX-License-Identifier: Apache-2.0
//
// Soft routing: gate probabilities, top-k selection, and capacity-limited
// dropping with batch-priority ranking.

#pragma once

#include <cstddef>
#include <vector>

#include "moekit/tensor.hpp"
#include "moekit/types.hpp"

namespace moekit {

/// Gating matrix plus the routing hyperparameters.
struct RouterState {
  Tensor weight;  // [width x num_experts]
  std::size_t num_experts = 1;
  std::size_t top_k = 1;
  double capacity_factor = 1.5;
  bool renormalize_gates = false;

  void validate() const;
};

/// Per-token routing outcome. `selected` holds the top_k expert indices in
/// descending probability (ties to the lower index); `gate` holds the raw
/// probabilities of those experts; `kept[i]` is cleared when capacity
/// dropping removes assignment i.
struct RoutingDecision {
  std::vector<double> probs;
  std::vector<std::size_t> selected;
  std::vector<double> gate;
  std::vector<bool> kept;
};

/// softmax(hidden . W) per token, differentiable w.r.t. both. [tokens x E].
Tensor route_probabilities(const TokenBatch& batch, const RouterState& state);

/// Top-k selection on one probability vector. Gates are the raw selected
/// probabilities; with renormalize they are rescaled to sum to 1.
RoutingDecision select_top_k(const std::vector<double>& probs, std::size_t k,
                             bool renormalize = false);

/// Batch top-k over a [tokens x E] probability matrix (row-major values).
std::vector<RoutingDecision> select_top_k_batch(const std::vector<double>& probs,
                                                std::size_t num_experts, std::size_t k,
                                                bool renormalize = false);

/// Per-expert capacity for a pool of `tokens` tokens: max(1, floor(c*k*T/E)).
std::size_t expert_capacity(double capacity_factor, std::size_t top_k,
                            std::size_t tokens, std::size_t num_experts);

/// Batch-priority dropping: for each expert, assignments are ranked by gate
/// weight descending (ties to the lower token index); ranks beyond capacity
/// get kept = false. Dropped assignments contribute nothing to the expert
/// sum; the residual path still carries the token.
void apply_capacity(std::vector<RoutingDecision>& decisions, double capacity_factor,
                    std::size_t num_experts);

/// Fraction of (token, expert) assignments with kept == false.
double drop_rate(const std::vector<RoutingDecision>& decisions);

}  // namespace moekit
