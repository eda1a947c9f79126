// SPDX-License-Identifier: Apache-2.0

#include "moekit/tuning.hpp"

#include <algorithm>
#include <cmath>

#include "moekit/objectives.hpp"

namespace moekit {

namespace {

// Token layout of the synthetic task.
constexpr int kDescribeMarker = 1;
constexpr int kEchoMarker = 2;
constexpr int kFillerBase = 10;
constexpr int kFillerCount = 32;
constexpr int kClassBase = 48;
constexpr int kEchoBase = 128;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

const char* to_string(Stage s) {
  switch (s) {
    case Stage::kI: return "I";
    case Stage::kII: return "II";
    case Stage::kIII: return "III";
  }
  return "?";
}

const char* to_string(TunedSubset s) {
  switch (s) {
    case TunedSubset::kMoe: return "moe";
    case TunedSubset::kFfnMoe: return "ffn_moe";
    case TunedSubset::kAll: return "all";
  }
  return "?";
}

std::vector<NamedParam> trainable_parameters(const ToyModel& model, const StageSpec& spec) {
  std::vector<NamedParam> out;
  for (const NamedParam& p : model.parameters()) {
    bool pick = false;
    switch (spec.stage) {
      case Stage::kI:
        pick = p.group == ParamGroup::kProjector;
        break;
      case Stage::kII:
        pick = true;
        break;
      case Stage::kIII:
        switch (spec.tuned_subset) {
          case TunedSubset::kMoe:
            pick = p.group == ParamGroup::kExpert || p.group == ParamGroup::kRouter;
            break;
          case TunedSubset::kFfnMoe:
            pick = p.group == ParamGroup::kExpert || p.group == ParamGroup::kRouter ||
                   p.group == ParamGroup::kFfn;
            break;
          case TunedSubset::kAll:
            pick = true;
            break;
        }
        break;
    }
    if (pick) out.push_back(p);
  }
  return out;
}

SyntheticDataset make_synthetic_dataset(std::uint64_t seed, std::size_t n_classes,
                                        std::size_t pseudo_image_tokens,
                                        std::size_t prompt_len, std::size_t answer_len,
                                        std::size_t n_samples, std::size_t image_feature_dim,
                                        std::size_t vocab) {
  if (n_classes < 2) throw ConfigError("dataset: need at least 2 classes");
  if (prompt_len < 2) throw ConfigError("dataset: prompt_len must be >= 2");
  if (answer_len < 1) throw ConfigError("dataset: answer_len must be >= 1");
  if (static_cast<int>(n_classes) > kEchoBase - kClassBase)
    throw ConfigError("dataset: too many classes for the token layout");
  if (vocab < static_cast<std::size_t>(kEchoBase + kFillerCount))
    throw ConfigError("dataset: vocabulary too small for the token layout");

  SyntheticDataset data;
  data.pseudo_image_tokens = pseudo_image_tokens;
  data.image_feature_dim = image_feature_dim;
  data.n_classes = n_classes;
  data.prompt_len = prompt_len;
  data.answer_len = answer_len;

  std::mt19937_64 rng(mix_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);

  // Frozen per-class prototypes: the output of the (parameter-free) vision
  // encoder stub for a canonical image of that class.
  std::vector<std::vector<double>> prototypes(n_classes);
  for (auto& proto : prototypes) {
    proto.resize(pseudo_image_tokens * image_feature_dim);
    for (double& v : proto) v = normal(rng);
  }

  std::uniform_int_distribution<int> filler(kFillerBase, kFillerBase + kFillerCount - 1);
  data.samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    SyntheticSample s;
    s.image_class = static_cast<int>(i % n_classes);
    s.image_dependent = (i / n_classes) % 2 == 0;

    s.image_features = prototypes[static_cast<std::size_t>(s.image_class)];
    for (double& v : s.image_features) v += 0.1 * normal(rng);

    s.prompt.reserve(prompt_len);
    s.prompt.push_back(s.image_dependent ? kDescribeMarker : kEchoMarker);
    for (std::size_t j = 1; j < prompt_len; ++j) s.prompt.push_back(filler(rng));

    s.answer.reserve(answer_len);
    for (std::size_t j = 0; j < answer_len; ++j) {
      if (s.image_dependent) {
        s.answer.push_back(kClassBase +
                           (s.image_class + static_cast<int>(j)) % static_cast<int>(n_classes));
      } else {
        const int src = s.prompt[1 + (j % (prompt_len - 1))] - kFillerBase;
        s.answer.push_back(kEchoBase + (src + static_cast<int>(j)) % kFillerCount);
      }
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

ModelInput to_model_input(const SyntheticSample& sample, std::size_t pseudo_image_tokens,
                          std::size_t image_feature_dim) {
  ModelInput in;
  in.image_features =
      Tensor::from_values({pseudo_image_tokens, image_feature_dim}, sample.image_features);
  in.tokens = sample.prompt;
  in.tokens.insert(in.tokens.end(), sample.answer.begin(), sample.answer.end());
  return in;
}

void append_targets(const SyntheticSample& sample, std::size_t pseudo_image_tokens,
                    std::size_t prompt_len, std::vector<int>& next_ids,
                    std::vector<std::uint8_t>& predict_mask) {
  const std::size_t n = sample.prompt.size() + sample.answer.size();
  const std::size_t s = pseudo_image_tokens + n;
  for (std::size_t j = 0; j < s; ++j) {
    int target = 0;
    std::uint8_t m = 0;
    if (j + 1 >= pseudo_image_tokens && j + 1 < s) {
      const std::size_t text_pos = j + 1 - pseudo_image_tokens;
      target = text_pos < sample.prompt.size()
                   ? sample.prompt[text_pos]
                   : sample.answer[text_pos - sample.prompt.size()];
      m = text_pos >= prompt_len ? 1 : 0;  // only answer tokens contribute
    }
    next_ids.push_back(target);
    predict_mask.push_back(m);
  }
}

namespace {

void fill_routing_metrics(const ForwardOutput& out, StepMetrics& metrics) {
  metrics.expert_macs = out.moe_stats.expert_macs;
  std::size_t total_assign = 0, dropped = 0;
  metrics.max_load_fraction = 0.0;
  for (const auto& layer_decisions : out.decisions) {
    std::vector<double> load;
    if (!layer_decisions.empty()) {
      const std::size_t experts = layer_decisions.front().probs.size();
      load.assign(experts, 0.0);
      for (const auto& d : layer_decisions) {
        load[d.selected.front()] += 1.0 / static_cast<double>(layer_decisions.size());
        total_assign += d.kept.size();
        for (bool kp : d.kept)
          if (!kp) ++dropped;
      }
      for (double f : load) metrics.max_load_fraction = std::max(metrics.max_load_fraction, f);
    }
    metrics.expert_load.push_back(std::move(load));
  }
  metrics.drop_rate =
      total_assign == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(total_assign);
}

}  // namespace

StageResult run_stage(ToyModel& model, const StageSpec& spec, const SyntheticDataset& data,
                      std::uint64_t seed, const MetricsCallback& on_step) {
  if (data.samples.empty()) throw ConfigError("run_stage: empty dataset");
  if (spec.batch_size < 1) throw ConfigError("run_stage: batch_size must be >= 1");
  if (spec.stage == Stage::kIII) {
    const bool has_moe = std::any_of(model.blocks.begin(), model.blocks.end(),
                                     [](const Block& b) { return b.is_moe(); });
    if (!has_moe)
      throw ConfigError("run_stage: stage III requires a model with expert layers");
  }

  auto all_params = model.parameters();
  for (NamedParam& p : all_params) p.tensor.set_requires_grad(false);
  auto trainable = trainable_parameters(model, spec);
  std::vector<Tensor> train_tensors;
  for (NamedParam& p : trainable) {
    p.tensor.set_requires_grad(true);
    train_tensors.push_back(p.tensor);
  }
  AdamOptimizer opt(train_tensors);

  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(spec.stage)));
  std::uniform_int_distribution<std::size_t> pick(0, data.samples.size() - 1);

  StageResult result;
  result.timeline.reserve(spec.steps);
  for (std::size_t step = 0; step < spec.steps; ++step) {
    std::vector<ModelInput> inputs;
    std::vector<int> next_ids;
    std::vector<std::uint8_t> mask;
    inputs.reserve(spec.batch_size);
    for (std::size_t b = 0; b < spec.batch_size; ++b) {
      const SyntheticSample& s = data.samples[pick(rng)];
      inputs.push_back(to_model_input(s, data.pseudo_image_tokens, data.image_feature_dim));
      append_targets(s, data.pseudo_image_tokens, data.prompt_len, next_ids, mask);
    }

    ForwardOutput out = model.forward(inputs);
    Tensor reg = autoregressive_loss(out.logits, next_ids, mask);
    std::vector<Tensor> aux;
    aux.reserve(out.gate_probs.size());
    for (std::size_t l = 0; l < out.gate_probs.size(); ++l) {
      std::vector<std::size_t> top1;
      top1.reserve(out.decisions[l].size());
      for (const auto& d : out.decisions[l]) top1.push_back(d.selected.front());
      aux.push_back(aux_loss(out.gate_probs[l], top1));
    }
    TotalLoss loss = total_loss(reg, aux, model.config.alpha);

    opt.zero_grad();
    backward(loss.total);
    const double lr = spec.schedule == LrSchedule::kCosine
                          ? cosine_lr(step, spec.steps, spec.learning_rate)
                          : spec.learning_rate;
    opt.step(lr);

    StepMetrics metrics;
    metrics.stage = spec.stage;
    metrics.step = step;
    metrics.lr = lr;
    metrics.total = loss.report.total;
    metrics.regressive = loss.report.regressive;
    metrics.aux_per_layer = loss.report.aux_per_layer;
    metrics.aux_mean = 0.0;
    for (double a : metrics.aux_per_layer) metrics.aux_mean += a;
    if (!metrics.aux_per_layer.empty())
      metrics.aux_mean /= static_cast<double>(metrics.aux_per_layer.size());
    fill_routing_metrics(out, metrics);
    if (on_step) on_step(metrics);
    result.timeline.push_back(std::move(metrics));
  }
  return result;
}

ToyModel expand_to_moe(const ToyModel& dense, std::size_t experts, std::size_t top_k,
                       double capacity_factor, RouterInit router_init, std::uint64_t seed) {
  if (dense.config.placement == MoePlacement::kDense)
    throw ConfigError("expand_to_moe: the configured placement has no expert layers");
  for (const Block& b : dense.blocks)
    if (b.is_moe()) throw ConfigError("expand_to_moe: model already has expert layers");

  ToyModel moe = dense.clone();
  moe.config.experts = experts;
  moe.config.top_k = top_k;
  moe.config.capacity_factor = capacity_factor;
  moe.config.router_init = router_init;
  moe.config.validate();

  std::mt19937_64 rng(mix_seed(seed, 0x5eedULL));
  const auto mask = moe.config.moe_block_mask();
  for (std::size_t i = 0; i < moe.blocks.size(); ++i) {
    if (!mask[i]) continue;
    Block& b = moe.blocks[i];
    b.ensemble = init_from_ffn(*b.ffn, experts, top_k, capacity_factor, router_init, rng,
                               moe.config.renormalize_gates);
    b.ffn.reset();
  }
  return moe;
}

PipelineOutcome run_pipeline(const ModelConfig& config, const SyntheticDataset& data,
                             const PipelineSpecs& specs, std::uint64_t seed,
                             const MetricsCallback& on_step, const StageCallback& on_stage) {
  config.validate();
  ToyModel dense = ToyModel::build_dense(config, seed);
  PipelineOutcome out;
  out.stage1 = run_stage(dense, specs.stage1, data, mix_seed(seed, 1), on_step);
  if (on_stage) on_stage(Stage::kI, dense);
  out.stage2 = run_stage(dense, specs.stage2, data, mix_seed(seed, 2), on_step);
  if (on_stage) on_stage(Stage::kII, dense);
  out.model = expand_to_moe(dense, config.experts, config.top_k, config.capacity_factor,
                            config.router_init, seed);
  out.stage3 = run_stage(out.model, specs.stage3, data, mix_seed(seed, 3), on_step);
  if (on_stage) on_stage(Stage::kIII, out.model);
  return out;
}

}  // namespace moekit
