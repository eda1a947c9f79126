// SPDX-License-Identifier: Apache-2.0
//
// The toy vision-language model: projector, embeddings, stacked blocks of
// pre-norm attention plus a dense FFN or an expert ensemble, and the exact
// parameter accounting for reference configurations.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moekit/moe.hpp"
#include "moekit/tensor.hpp"
#include "moekit/types.hpp"

namespace moekit {

/// Thrown on invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MoePlacement { kInterval, kFirstHalf, kSecondHalf, kAll, kDense };

const char* to_string(MoePlacement p);
MoePlacement placement_from_string(const std::string& s);

struct ModelConfig {
  std::string name = "toy";
  std::size_t embedding_size = 256;  // vocabulary size
  std::size_t width = 64;
  std::size_t layers = 4;
  std::size_t ffn_size = 128;
  std::size_t ffn_factor = 2;
  std::size_t heads = 4;
  std::size_t experts = 4;
  std::size_t top_k = 2;
  MoePlacement placement = MoePlacement::kInterval;
  std::size_t moe_layers = 2;
  double capacity_factor = 1.5;
  std::size_t pseudo_image_tokens = 16;
  double alpha = 0.01;
  // toy-model plumbing
  std::size_t image_feature_dim = 32;
  std::size_t max_seq_len = 64;
  bool renormalize_gates = false;
  RouterInit router_init = RouterInit::kZeros;
  // Key/value projection width for parameter accounting of reduced-kv
  // reference rows; 0 means full width. The toy model itself always uses
  // full-width attention.
  std::size_t kv_width = 0;

  void validate() const;
  /// True for block indices that hold an expert ensemble.
  std::vector<bool> moe_block_mask() const;
};

struct ParamCount {
  std::uint64_t activated = 0;
  std::uint64_t total = 0;
};

/// Closed-form backbone parameter count:
///   embedding*width
///   + layers*(attn + width*ffn*factor + 2*width)
///   + width + width*embedding
///   + moe_layers*(experts-1)*(width*ffn*factor + 2*width)
///   + moe_layers*(width*experts)
/// where attn = 4*width^2, or 2*width^2 + 2*width*kv_width when kv_width is
/// set. Activated substitutes top_k for experts in the replication term; the
/// router term stays at full experts since every token evaluates the whole
/// router. Counts cover the backbone only (no projector, no positional
/// table, which stands in for parameter-free rotary embeddings).
ParamCount count_parameters(const ModelConfig& config);

enum class ParamGroup : std::uint8_t {
  kProjector,
  kPositional,
  kEmbedding,
  kAttention,
  kNorm,
  kHead,
  kFfn,
  kExpert,
  kRouter,
};

struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

struct Block {
  Tensor wq, wk, wv, wo;
  std::optional<Ffn> ffn;
  std::optional<ExpertEnsemble> ensemble;
  bool is_moe() const { return ensemble.has_value(); }
};

/// One training sample as the model consumes it: P pseudo-image feature
/// vectors followed by the text token ids (prompt then answer).
struct ModelInput {
  Tensor image_features;  // [P x image_feature_dim]
  std::vector<int> tokens;
};

struct ForwardOutput {
  Tensor logits;  // [total rows x vocab]
  std::vector<Tensor> gate_probs;
  std::vector<std::vector<RoutingDecision>> decisions;
  std::vector<std::size_t> sample_offset;  // row offset per sample, plus total
  std::vector<Modality> modality;          // per row
  std::vector<std::size_t> position;       // per row, within its sample
  MoeForwardStats moe_stats;
};

class ToyModel {
 public:
  ModelConfig config;

  Tensor proj_w1, proj_b1, proj_w2, proj_b2;
  Tensor pos_embedding;
  Tensor tok_embedding;
  std::vector<Block> blocks;
  Tensor final_gain;
  Tensor head;

  /// Deterministic build from a seed; expert blocks are created by
  /// replicating the freshly initialized FFN of that block.
  static ToyModel build(const ModelConfig& config, std::uint64_t seed);
  /// Same skeleton with every block dense, regardless of placement.
  static ToyModel build_dense(const ModelConfig& config, std::uint64_t seed);

  ForwardOutput forward(std::span<const ModelInput> batch, RoutingTrace* trace = nullptr) const;

  std::vector<NamedParam> parameters() const;
  /// Sum of parameter buffer lengths over the groups the closed-form count
  /// models (everything except projector and positional table).
  std::uint64_t backbone_parameter_count() const;
  ToyModel clone() const;

 private:
  Tensor ln_ones_, ln_zeros_;  // constants for the non-affine block norms
  static ToyModel build_impl(const ModelConfig& config, std::uint64_t seed, bool force_dense);
};

// --- checkpoint io ----------------------------------------------------------
// Single-file little-endian binary: magic "MOEL", u32 version, config block,
// then named parameter buffers. Layout documented in docs/formats.md.

void save_model(const ToyModel& model, const std::string& path);
ToyModel load_model(const std::string& path);

}  // namespace moekit
