// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

enum class Modality : std::uint8_t { kImage = 0, kText = 1 };

/// A flat pool of token hidden states with per-token metadata. `hidden` is
/// [tokens x width]; the metadata vectors run parallel to its rows.
struct TokenBatch {
  Tensor hidden;
  std::vector<Modality> modality;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> position;  // position within the owning sequence

  std::size_t tokens() const { return hidden.defined() ? hidden.shape()[0] : 0; }
};

/// Routing record for one expert layer: everything the analytics need,
/// detached from the graph.
struct LayerTrace {
  std::size_t layer_index = 0;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  // Row-major [tokens x num_experts] gate probabilities.
  std::vector<double> probs;
  // [tokens x top_k] expert indices in descending probability, and the
  // matching kept flags after capacity dropping.
  std::vector<std::size_t> selected;
  std::vector<std::uint8_t> kept;
  std::vector<Modality> modality;
  std::vector<std::size_t> position;

  std::size_t tokens() const { return num_experts == 0 ? 0 : probs.size() / num_experts; }
  double prob(std::size_t token, std::size_t expert) const {
    return probs[token * num_experts + expert];
  }
};

/// Per-layer routing records for one forward pass.
struct RoutingTrace {
  std::vector<LayerTrace> layers;
};

}  // namespace moekit
