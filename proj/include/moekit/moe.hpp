// SPDX-License-Identifier: Apache-2.0
//
// Expert ensembles: the FFN parameter package, replication-based expert
// initialization, and the sparse forward pass.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "moekit/router.hpp"
#include "moekit/tensor.hpp"
#include "moekit/types.hpp"

namespace moekit {

/// One FFN parameter package. factor 2 is in -> GELU -> out; factor 3 is the
/// gated three-matrix form (gelu(W1 x) . (W3 x)) W2. Every instance carries
/// an input bias and an output bias, so its size is width*ffn*factor + 2*width.
struct Ffn {
  std::size_t width = 0;
  std::size_t hidden = 0;
  std::size_t factor = 2;
  Tensor in_bias;   // [width]
  Tensor w1;        // [width x hidden]
  Tensor w3;        // [width x hidden], factor 3 only
  Tensor w2;        // [hidden x width]
  Tensor out_bias;  // [width]

  static Ffn init(std::size_t width, std::size_t hidden, std::size_t factor,
                  std::mt19937_64& rng, bool trainable = true);
  Tensor forward(const Tensor& x) const;
  /// Bitwise copy of all parameter buffers.
  Ffn clone() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

enum class RouterInit { kZeros, kSmallRandom };

struct ExpertEnsemble {
  std::vector<Ffn> experts;
  RouterState router;

  std::size_t num_experts() const { return experts.size(); }
  std::vector<Tensor> parameters() const;
};

/// Replicates `ffn` E times (bitwise-equal parameters) and attaches a fresh
/// router. Zero router init gives uniform gates, which makes the expanded
/// layer compute exactly (k/E) * FFN(x) when capacity is slack.
ExpertEnsemble init_from_ffn(const Ffn& ffn, std::size_t num_experts, std::size_t top_k,
                             double capacity_factor, RouterInit router_init,
                             std::mt19937_64& rng, bool renormalize_gates = false);

struct MoeForwardStats {
  std::uint64_t expert_macs = 0;
  std::size_t total_assignments = 0;
  std::size_t dropped_assignments = 0;
};

/// Eq-style sparse forward: per token, sum of gate-weighted outputs of the
/// kept top-k experts. Summation runs in ascending expert order, so results
/// are bitwise reproducible. Also returns the gate-probability tensor so the
/// caller can attach the balance loss.
struct MoeForwardResult {
  Tensor output;
  Tensor gate_probs;  // [tokens x E], differentiable
  std::vector<RoutingDecision> decisions;
};

MoeForwardResult moe_forward(const TokenBatch& batch, const ExpertEnsemble& ensemble,
                             LayerTrace* trace = nullptr, MoeForwardStats* stats = nullptr);

}  // namespace moekit
