// SPDX-License-Identifier: Apache-2.0
//
// The three-stage tuning schedule: per-stage parameter freezing, the Adam +
// cosine training loop, sparse expansion of a dense checkpoint, and the
// synthetic bimodal dataset that drives desk-scale runs.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moekit/model.hpp"
#include "moekit/optim.hpp"

namespace moekit {

enum class Stage { kI = 1, kII = 2, kIII = 3 };
enum class TunedSubset { kMoe, kFfnMoe, kAll };
enum class LrSchedule { kCosine, kConstant };

const char* to_string(Stage s);
const char* to_string(TunedSubset s);

struct StageSpec {
  Stage stage = Stage::kI;
  std::size_t steps = 100;
  double learning_rate = 1e-3;
  LrSchedule schedule = LrSchedule::kCosine;
  TunedSubset tuned_subset = TunedSubset::kMoe;  // stage III only
  std::size_t batch_size = 16;
};

/// Stage I trains the projector only; stage II trains everything (the
/// vision-encoder stub lives in the data generator and has no parameters);
/// stage III trains the expert layers, optionally widened to all FFNs or to
/// every parameter.
std::vector<NamedParam> trainable_parameters(const ToyModel& model, const StageSpec& spec);

// --- synthetic bimodal data --------------------------------------------------

struct SyntheticSample {
  int image_class = 0;
  bool image_dependent = false;  // answer requires reading the pseudo-image
  std::vector<double> image_features;  // row-major [P x C]
  std::vector<int> prompt;
  std::vector<int> answer;
};

struct SyntheticDataset {
  std::size_t pseudo_image_tokens = 0;
  std::size_t image_feature_dim = 0;
  std::size_t n_classes = 0;
  std::size_t prompt_len = 0;
  std::size_t answer_len = 0;
  std::vector<SyntheticSample> samples;
};

/// Deterministic, class-balanced mix of image-conditioned answers and
/// text-only (prompt echo) answers, so routing analytics see genuinely mixed
/// traffic. Pseudo-image features come from per-class prototypes plus small
/// noise, standing in for a frozen vision encoder.
SyntheticDataset make_synthetic_dataset(std::uint64_t seed, std::size_t n_classes,
                                        std::size_t pseudo_image_tokens,
                                        std::size_t prompt_len, std::size_t answer_len,
                                        std::size_t n_samples, std::size_t image_feature_dim,
                                        std::size_t vocab);

ModelInput to_model_input(const SyntheticSample& sample, std::size_t pseudo_image_tokens,
                          std::size_t image_feature_dim);

/// Shift-by-one targets for one sample: logits row j is scored against the
/// token at position j+1, and only answer positions contribute.
void append_targets(const SyntheticSample& sample, std::size_t pseudo_image_tokens,
                    std::size_t prompt_len, std::vector<int>& next_ids,
                    std::vector<std::uint8_t>& predict_mask);

// --- training loop -----------------------------------------------------------

struct StepMetrics {
  Stage stage = Stage::kI;
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double regressive = 0.0;
  double aux_mean = 0.0;
  std::vector<double> aux_per_layer;
  std::vector<std::vector<double>> expert_load;  // per expert layer
  double drop_rate = 0.0;
  double max_load_fraction = 0.0;
  std::uint64_t expert_macs = 0;
};

using MetricsCallback = std::function<void(const StepMetrics&)>;

struct StageResult {
  std::vector<StepMetrics> timeline;
};

/// Runs one stage in place. Frozen parameter buffers are bitwise identical
/// before and after. Stage III on a model without expert blocks is an error.
StageResult run_stage(ToyModel& model, const StageSpec& spec, const SyntheticDataset& data,
                      std::uint64_t seed, const MetricsCallback& on_step = nullptr);

/// Replaces every placement-selected dense FFN with a replicated expert
/// ensemble; all other buffers are copied verbatim. With zero router init
/// the expanded model's expert layers compute (k/E) * FFN(x).
ToyModel expand_to_moe(const ToyModel& dense, std::size_t experts, std::size_t top_k,
                       double capacity_factor, RouterInit router_init = RouterInit::kZeros,
                       std::uint64_t seed = 0);

struct PipelineSpecs {
  StageSpec stage1{Stage::kI, 100, 3e-3, LrSchedule::kCosine, TunedSubset::kMoe, 16};
  StageSpec stage2{Stage::kII, 150, 1e-3, LrSchedule::kCosine, TunedSubset::kMoe, 16};
  StageSpec stage3{Stage::kIII, 500, 2e-3, LrSchedule::kCosine, TunedSubset::kMoe, 16};
};

struct PipelineOutcome {
  ToyModel model;
  StageResult stage1, stage2, stage3;
};

using StageCallback = std::function<void(Stage, const ToyModel&)>;

/// Dense build -> stage I -> stage II -> sparse expansion -> stage III,
/// deterministic end to end from one seed.
PipelineOutcome run_pipeline(const ModelConfig& config, const SyntheticDataset& data,
                             const PipelineSpecs& specs, std::uint64_t seed,
                             const MetricsCallback& on_step = nullptr,
                             const StageCallback& on_stage = nullptr);

}  // namespace moekit
