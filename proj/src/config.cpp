// SPDX-License-Identifier: Apache-2.0

#include "moekit/config.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace moekit {

namespace {

using nlohmann::json;

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

LrSchedule schedule_from_string(const std::string& s) {
  if (s == "cosine") return LrSchedule::kCosine;
  if (s == "constant") return LrSchedule::kConstant;
  throw ConfigError("config: unknown schedule '" + s + "'");
}

TunedSubset subset_from_string(const std::string& s) {
  if (s == "moe") return TunedSubset::kMoe;
  if (s == "ffn_moe") return TunedSubset::kFfnMoe;
  if (s == "all") return TunedSubset::kAll;
  throw ConfigError("config: unknown tuned_subset '" + s + "'");
}

RouterInit router_init_from_string(const std::string& s) {
  if (s == "zeros") return RouterInit::kZeros;
  if (s == "small_random") return RouterInit::kSmallRandom;
  throw ConfigError("config: unknown router_init '" + s + "'");
}

ModelConfig parse_model(const json& j) {
  ModelConfig m;
  m.name = get_or<std::string>(j, "name", m.name);
  m.embedding_size = get_or<std::size_t>(j, "embedding_size", m.embedding_size);
  m.width = get_or<std::size_t>(j, "width", m.width);
  m.layers = get_or<std::size_t>(j, "layers", m.layers);
  m.ffn_size = get_or<std::size_t>(j, "ffn_size", m.ffn_size);
  m.ffn_factor = get_or<std::size_t>(j, "ffn_factor", m.ffn_factor);
  m.heads = get_or<std::size_t>(j, "heads", m.heads);
  m.experts = get_or<std::size_t>(j, "experts", m.experts);
  m.top_k = get_or<std::size_t>(j, "top_k", m.top_k);
  m.placement = placement_from_string(get_or<std::string>(j, "placement", to_string(m.placement)));
  m.capacity_factor = get_or<double>(j, "capacity_factor", m.capacity_factor);
  m.pseudo_image_tokens = get_or<std::size_t>(j, "pseudo_image_tokens", m.pseudo_image_tokens);
  m.alpha = get_or<double>(j, "alpha", m.alpha);
  m.image_feature_dim = get_or<std::size_t>(j, "image_feature_dim", m.image_feature_dim);
  m.max_seq_len = get_or<std::size_t>(j, "max_seq_len", m.max_seq_len);
  m.renormalize_gates = get_or<bool>(j, "renormalize_gates", m.renormalize_gates);
  m.router_init = router_init_from_string(get_or<std::string>(j, "router_init", "zeros"));
  m.kv_width = get_or<std::size_t>(j, "kv_width", m.kv_width);
  if (j.contains("moe_layers")) {
    m.moe_layers = j.at("moe_layers").get<std::size_t>();
  } else {
    const auto mask = m.moe_block_mask();
    m.moe_layers = 0;
    for (bool b : mask) m.moe_layers += b ? 1 : 0;
  }
  m.validate();
  return m;
}

StageSpec parse_stage(const json& j, const StageSpec& defaults) {
  StageSpec s = defaults;
  if (j.contains("stage")) {
    const std::string st = j.at("stage").get<std::string>();
    if (st == "I")
      s.stage = Stage::kI;
    else if (st == "II")
      s.stage = Stage::kII;
    else if (st == "III")
      s.stage = Stage::kIII;
    else
      throw ConfigError("config: unknown stage '" + st + "'");
  }
  s.steps = get_or<std::size_t>(j, "steps", s.steps);
  s.learning_rate = get_or<double>(j, "learning_rate", s.learning_rate);
  if (j.contains("schedule"))
    s.schedule = schedule_from_string(j.at("schedule").get<std::string>());
  if (j.contains("tuned_subset"))
    s.tuned_subset = subset_from_string(j.at("tuned_subset").get<std::string>());
  s.batch_size = get_or<std::size_t>(j, "batch_size", s.batch_size);
  if (s.steps == 0) throw ConfigError("config: stage steps must be >= 1");
  if (!(s.learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
  return s;
}

}  // namespace

SyntheticDataset RunConfig::build_dataset() const {
  return make_synthetic_dataset(seed, data.n_classes, model.pseudo_image_tokens, data.prompt_len,
                                data.answer_len, data.samples, model.image_feature_dim,
                                model.embedding_size);
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig rc;
  rc.model = parse_model(j.contains("model") ? j.at("model") : json::object());
  if (j.contains("data")) {
    const json& d = j.at("data");
    rc.data.n_classes = get_or<std::size_t>(d, "n_classes", rc.data.n_classes);
    rc.data.prompt_len = get_or<std::size_t>(d, "prompt_len", rc.data.prompt_len);
    rc.data.answer_len = get_or<std::size_t>(d, "answer_len", rc.data.answer_len);
    rc.data.samples = get_or<std::size_t>(d, "samples", rc.data.samples);
  }
  rc.seed = get_or<std::uint64_t>(j, "seed", rc.seed);
  if (j.contains("expected")) {
    const json& e = j.at("expected");
    if (e.contains("activated_b")) rc.reported_activated_b = e.at("activated_b").get<double>();
    if (e.contains("total_b")) rc.reported_total_b = e.at("total_b").get<double>();
  }
  if (j.contains("training")) {
    const json& t = j.at("training");
    const auto batch = get_or<std::size_t>(t, "batch_size", rc.training.stage1.batch_size);
    rc.training.stage1.batch_size = batch;
    rc.training.stage2.batch_size = batch;
    rc.training.stage3.batch_size = batch;
    if (t.contains("stages")) {
      if (!t.at("stages").is_array()) throw ConfigError("config: training.stages must be an array");
      for (const json& sj : t.at("stages")) {
        StageSpec* target = nullptr;
        StageSpec parsed = parse_stage(sj, StageSpec{});
        switch (parsed.stage) {
          case Stage::kI: target = &rc.training.stage1; break;
          case Stage::kII: target = &rc.training.stage2; break;
          case Stage::kIII: target = &rc.training.stage3; break;
        }
        parsed = parse_stage(sj, *target);
        parsed.stage = target->stage;
        *target = parsed;
      }
    }
  }
  // The sequence length the dataset produces must fit the model.
  const std::size_t seq =
      rc.model.pseudo_image_tokens + rc.data.prompt_len + rc.data.answer_len;
  if (seq > rc.model.max_seq_len)
    throw ConfigError("config: pseudo_image_tokens + prompt_len + answer_len exceeds max_seq_len");
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string run_config_to_json(const RunConfig& rc) {
  json j;
  json m;
  m["name"] = rc.model.name;
  m["embedding_size"] = rc.model.embedding_size;
  m["width"] = rc.model.width;
  m["layers"] = rc.model.layers;
  m["ffn_size"] = rc.model.ffn_size;
  m["ffn_factor"] = rc.model.ffn_factor;
  m["heads"] = rc.model.heads;
  m["experts"] = rc.model.experts;
  m["top_k"] = rc.model.top_k;
  m["placement"] = to_string(rc.model.placement);
  m["moe_layers"] = rc.model.moe_layers;
  m["capacity_factor"] = rc.model.capacity_factor;
  m["pseudo_image_tokens"] = rc.model.pseudo_image_tokens;
  m["alpha"] = rc.model.alpha;
  m["image_feature_dim"] = rc.model.image_feature_dim;
  m["max_seq_len"] = rc.model.max_seq_len;
  m["renormalize_gates"] = rc.model.renormalize_gates;
  m["router_init"] = rc.model.router_init == RouterInit::kZeros ? "zeros" : "small_random";
  if (rc.model.kv_width) m["kv_width"] = rc.model.kv_width;
  j["model"] = std::move(m);
  json d;
  d["n_classes"] = rc.data.n_classes;
  d["prompt_len"] = rc.data.prompt_len;
  d["answer_len"] = rc.data.answer_len;
  d["samples"] = rc.data.samples;
  j["data"] = std::move(d);
  json stages = json::array();
  for (const StageSpec* s : {&rc.training.stage1, &rc.training.stage2, &rc.training.stage3}) {
    json sj;
    sj["stage"] = to_string(s->stage);
    sj["steps"] = s->steps;
    sj["learning_rate"] = s->learning_rate;
    sj["schedule"] = s->schedule == LrSchedule::kCosine ? "cosine" : "constant";
    if (s->stage == Stage::kIII) sj["tuned_subset"] = to_string(s->tuned_subset);
    sj["batch_size"] = s->batch_size;
    stages.push_back(std::move(sj));
  }
  j["training"]["stages"] = std::move(stages);
  j["seed"] = rc.seed;
  return j.dump(2);
}

}  // namespace moekit
