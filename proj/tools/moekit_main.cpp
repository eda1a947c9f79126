// SPDX-License-Identifier: Apache-2.0
//
// moekit command line: parameter accounting, staged training runs, routing
// analytics reports, and ablation sweeps over sparse-layer settings.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moekit/analytics.hpp"
#include "moekit/config.hpp"
#include "moekit/model.hpp"
#include "moekit/tuning.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moekit;

namespace {

#ifndef MOEKIT_VERSION
#define MOEKIT_VERSION "0.1.0"
#endif

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::string default_out_dir(const std::string& run_id) {
  const char* root = std::getenv("MOEKIT_OUT_ROOT");
  return (fs::path(root ? root : "runs") / run_id).string();
}

json metrics_to_json(const StepMetrics& m) {
  json j;
  j["stage"] = to_string(m.stage);
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["total"] = m.total;
  j["regressive"] = m.regressive;
  j["aux_mean"] = m.aux_mean;
  j["aux_per_layer"] = m.aux_per_layer;
  j["expert_load"] = m.expert_load;
  j["drop_rate"] = m.drop_rate;
  j["max_load_fraction"] = m.max_load_fraction;
  j["expert_macs"] = m.expert_macs;
  return j;
}

void write_manifest(const fs::path& out_dir, const std::string& config_path,
                    std::uint64_t seed, const std::string& stages, const RunConfig& rc) {
  json j;
  j["run_id"] = rc.model.name + "-s" + std::to_string(seed);
  j["config_path"] = config_path;
  j["seed"] = seed;
  j["stages"] = stages;
  j["output_dir"] = out_dir.string();
  j["version"] = std::string("moekit ") + MOEKIT_VERSION;
  j["config"] = json::parse(run_config_to_json(rc));
  std::ofstream os(out_dir / "manifest.json");
  os << j.dump(2) << "\n";
}

struct RunLayout {
  fs::path out;
  fs::path checkpoints;
  fs::path reports;
  std::ofstream metrics;

  explicit RunLayout(const fs::path& out_dir) : out(out_dir) {
    checkpoints = out / "checkpoints";
    reports = out / "reports";
    fs::create_directories(checkpoints);
    fs::create_directories(reports);
    metrics.open(out / "metrics.jsonl", std::ios::app);
    if (!metrics) throw ConfigError("cannot open metrics file under '" + out.string() + "'");
  }
};

fs::path stage_checkpoint(const RunLayout& layout, Stage stage) {
  return layout.checkpoints / ("stage" + std::string(to_string(stage)) + ".moel");
}

int cmd_params(const std::string& config_path, const std::string& json_out) {
  RunConfig rc = load_run_config(config_path);
  const ParamCount pc = count_parameters(rc.model);
  const double act_b = static_cast<double>(pc.activated) / 1e9;
  const double tot_b = static_cast<double>(pc.total) / 1e9;
  std::cout << "model: " << rc.model.name << "\n"
            << "activated parameters: " << pc.activated << " (" << act_b << "e9)\n"
            << "total parameters:     " << pc.total << " (" << tot_b << "e9)\n";
  if (rc.reported_activated_b)
    std::cout << "published activated:  " << *rc.reported_activated_b << "e9 (delta "
              << act_b - *rc.reported_activated_b << ")\n";
  if (rc.reported_total_b)
    std::cout << "published total:      " << *rc.reported_total_b << "e9 (delta "
              << tot_b - *rc.reported_total_b << ")\n";
  if (!json_out.empty()) {
    json j;
    j["model"] = rc.model.name;
    j["activated"] = pc.activated;
    j["total"] = pc.total;
    j["activated_b"] = act_b;
    j["total_b"] = tot_b;
    std::ofstream os(json_out);
    if (!os) throw ConfigError("cannot write '" + json_out + "'");
    os << j.dump(2) << "\n";
  }
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& stage_arg,
              std::optional<std::uint64_t> seed_arg, std::string out_dir,
              const std::string& init_path) {
  RunConfig rc = load_run_config(config_path);
  const std::uint64_t seed = seed_arg.value_or(rc.seed);
  rc.seed = seed;
  if (out_dir.empty()) out_dir = default_out_dir(rc.model.name + "-s" + std::to_string(seed));
  RunLayout layout{fs::path(out_dir)};
  write_manifest(layout.out, config_path, seed, stage_arg, rc);
  SyntheticDataset data = rc.build_dataset();

  const MetricsCallback on_step = [&layout](const StepMetrics& m) {
    layout.metrics << metrics_to_json(m).dump() << "\n";
  };

  auto seed_mix = [seed](std::uint64_t salt) { return seed * 0x100000001b3ULL + salt; };

  if (stage_arg == "all") {
    const StageCallback on_stage = [&](Stage stage, const ToyModel& model) {
      save_model(model, stage_checkpoint(layout, stage).string());
      std::cout << "stage " << to_string(stage) << " complete -> "
                << stage_checkpoint(layout, stage).string() << "\n";
    };
    run_pipeline(rc.model, data, rc.training, seed, on_step, on_stage);
    return kExitOk;
  }

  auto load_previous = [&](Stage prev) {
    const fs::path path = init_path.empty() ? stage_checkpoint(layout, prev) : fs::path(init_path);
    if (!fs::exists(path))
      throw ConfigError("stage " + std::string(to_string(prev)) +
                        " checkpoint not found at '" + path.string() +
                        "'; run the earlier stage first or pass --init");
    return load_model(path.string());
  };

  if (stage_arg == "I") {
    ToyModel model = ToyModel::build_dense(rc.model, seed);
    run_stage(model, rc.training.stage1, data, seed_mix(1), on_step);
    save_model(model, stage_checkpoint(layout, Stage::kI).string());
  } else if (stage_arg == "II") {
    ToyModel model = load_previous(Stage::kI);
    run_stage(model, rc.training.stage2, data, seed_mix(2), on_step);
    save_model(model, stage_checkpoint(layout, Stage::kII).string());
  } else if (stage_arg == "III") {
    ToyModel dense = load_previous(Stage::kII);
    ToyModel model = expand_to_moe(dense, rc.model.experts, rc.model.top_k,
                                   rc.model.capacity_factor, rc.model.router_init, seed);
    run_stage(model, rc.training.stage3, data, seed_mix(3), on_step);
    save_model(model, stage_checkpoint(layout, Stage::kIII).string());
  } else {
    throw ConfigError("unknown --stage '" + stage_arg + "' (expected I, II, III, or all)");
  }
  std::cout << "stage " << stage_arg << " complete -> " << out_dir << "\n";
  return kExitOk;
}

int cmd_analyze(const std::string& checkpoint, const std::string& config_path,
                std::size_t samples, std::uint64_t seed, std::string out_dir) {
  ToyModel model = load_model(checkpoint);
  DataConfig data_cfg;
  if (!config_path.empty()) data_cfg = load_run_config(config_path).data;
  if (out_dir.empty()) out_dir = default_out_dir(model.config.name + "-analyze");
  fs::create_directories(out_dir);
  SyntheticDataset data = make_synthetic_dataset(
      seed, data_cfg.n_classes, model.config.pseudo_image_tokens, data_cfg.prompt_len,
      data_cfg.answer_len, std::max<std::size_t>(samples, 1), model.config.image_feature_dim,
      model.config.embedding_size);

  std::vector<ModelInput> batch;
  batch.reserve(data.samples.size());
  for (const SyntheticSample& s : data.samples)
    batch.push_back(to_model_input(s, data.pseudo_image_tokens, data.image_feature_dim));
  RoutingTrace trace;
  (void)model.forward(batch, &trace);
  if (trace.layers.empty())
    std::cout << "note: model has no expert layers; reports will be empty\n";

  const fs::path out(out_dir);
  write_loads_csv(trace, (out / "loads.csv").string());
  write_preferences_csv(trace, (out / "preferences.csv").string());
  PathwayReport report =
      trace.layers.empty() ? PathwayReport{} : token_pathways(trace, 10);
  write_pathways_json(report, (out / "pathways.json").string());
  std::cout << "reports written to " << out_dir << "\n";
  return kExitOk;
}

struct AblateRow {
  std::string value;
  double final_total = 0.0;
  double final_regressive = 0.0;
  double drop_rate = 0.0;
  double max_load_fraction = 0.0;
  double wall_seconds = 0.0;
};

int cmd_ablate(const std::string& config_path, const std::string& axis,
               const std::vector<std::string>& values, std::optional<std::uint64_t> seed_arg,
               const std::string& out_dir) {
  if (values.empty()) throw ConfigError("ablate: at least one --values entry required");
  RunConfig base = load_run_config(config_path);
  const std::uint64_t seed = seed_arg.value_or(base.seed);
  std::vector<AblateRow> rows;
  for (const std::string& value : values) {
    RunConfig rc = base;
    rc.seed = seed;
    if (axis == "experts") {
      rc.model.experts = std::stoul(value);
      rc.model.top_k = std::min(rc.model.top_k, rc.model.experts);
    } else if (axis == "topk") {
      rc.model.top_k = std::stoul(value);
      if (rc.model.top_k > rc.model.experts)
        throw ConfigError("ablate: topk value exceeds expert count");
    } else if (axis == "placement") {
      rc.model.placement = placement_from_string(value);
      const auto mask = rc.model.moe_block_mask();
      rc.model.moe_layers = 0;
      for (bool b : mask) rc.model.moe_layers += b ? 1 : 0;
    } else if (axis == "capacity") {
      rc.model.capacity_factor = std::stod(value);
    } else if (axis == "subset") {
      if (value == "moe")
        rc.training.stage3.tuned_subset = TunedSubset::kMoe;
      else if (value == "ffn_moe")
        rc.training.stage3.tuned_subset = TunedSubset::kFfnMoe;
      else if (value == "all")
        rc.training.stage3.tuned_subset = TunedSubset::kAll;
      else
        throw ConfigError("ablate: unknown subset '" + value + "'");
    } else {
      throw ConfigError("ablate: unknown axis '" + axis + "'");
    }
    rc.model.validate();
    SyntheticDataset data = rc.build_dataset();
    const auto start = std::chrono::steady_clock::now();
    PipelineOutcome out = run_pipeline(rc.model, data, rc.training, seed);
    const auto stop = std::chrono::steady_clock::now();
    const StepMetrics& last = out.stage3.timeline.back();
    AblateRow row;
    row.value = value;
    row.final_total = last.total;
    row.final_regressive = last.regressive;
    row.drop_rate = last.drop_rate;
    row.max_load_fraction = last.max_load_fraction;
    row.wall_seconds = std::chrono::duration<double>(stop - start).count();
    rows.push_back(row);
  }

  std::cout << "axis: " << axis << "\n";
  std::cout << "value,final_total,final_regressive,drop_rate,max_load_fraction,wall_seconds\n";
  for (const AblateRow& r : rows)
    std::cout << r.value << "," << r.final_total << "," << r.final_regressive << ","
              << r.drop_rate << "," << r.max_load_fraction << "," << r.wall_seconds << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "ablate.csv");
    os << "axis,value,final_total,final_regressive,drop_rate,max_load_fraction,wall_seconds\n";
    for (const AblateRow& r : rows)
      os << axis << "," << r.value << "," << r.final_total << "," << r.final_regressive << ","
         << r.drop_rate << "," << r.max_load_fraction << "," << r.wall_seconds << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moekit: sparse expert layer mechanics, staged tuning, routing analytics"};
  app.set_version_flag("--version", std::string("moekit ") + MOEKIT_VERSION);
  app.require_subcommand(1);

  std::string config_path, json_out;
  auto* params = app.add_subcommand("params", "parameter accounting for a model configuration");
  params->add_option("config", config_path, "run configuration json")->required();
  params->add_option("--json", json_out, "also write the counts as json");

  std::string train_config, stage_arg = "all", train_out, init_path;
  std::optional<std::uint64_t> seed_arg;
  auto* train = app.add_subcommand("train", "run the staged tuning pipeline");
  train->add_option("config", train_config, "run configuration json")->required();
  train->add_option("--stage", stage_arg, "I, II, III, or all (default all)");
  train->add_option("--seed", seed_arg, "override the config seed");
  train->add_option("--out", train_out, "output directory (default $MOEKIT_OUT_ROOT/<run-id>)");
  train->add_option("--init", init_path, "checkpoint to start from (stages II/III)");

  std::string analyze_ckpt, analyze_config, analyze_out;
  std::size_t analyze_samples = 64;
  std::uint64_t analyze_seed = 0;
  auto* analyze = app.add_subcommand("analyze", "emit routing reports for a checkpoint");
  analyze->add_option("checkpoint", analyze_ckpt, "model checkpoint (.moel)")->required();
  analyze->add_option("--config", analyze_config, "run configuration json for the data block");
  analyze->add_option("--samples", analyze_samples, "number of samples to trace");
  analyze->add_option("--seed", analyze_seed, "dataset seed");
  analyze->add_option("--out", analyze_out, "report directory");

  std::string ablate_config, ablate_axis, ablate_out;
  std::vector<std::string> ablate_values;
  std::optional<std::uint64_t> ablate_seed;
  auto* ablate = app.add_subcommand("ablate", "sweep one configuration axis");
  ablate->add_option("config", ablate_config, "run configuration json")->required();
  ablate->add_option("--axis", ablate_axis, "experts|topk|placement|capacity|subset")->required();
  ablate->add_option("--values", ablate_values, "axis values")->required()->expected(-1);
  ablate->add_option("--seed", ablate_seed, "override the config seed");
  ablate->add_option("--out", ablate_out, "directory for ablate.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (params->parsed()) return cmd_params(config_path, json_out);
    if (train->parsed()) return cmd_train(train_config, stage_arg, seed_arg, train_out, init_path);
    if (analyze->parsed())
      return cmd_analyze(analyze_ckpt, analyze_config, analyze_samples, analyze_seed, analyze_out);
    if (ablate->parsed())
      return cmd_ablate(ablate_config, ablate_axis, ablate_values, ablate_seed, ablate_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
