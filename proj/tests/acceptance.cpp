// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Each criterion pins its tolerance in code.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "moekit/analytics.hpp"
#include "moekit/config.hpp"
#include "moekit/model.hpp"
#include "moekit/objectives.hpp"
#include "moekit/tuning.hpp"
#include "oracles.hpp"

using namespace moekit;
namespace fs = std::filesystem;

namespace {

struct Checker {
  int failures = 0;
  void report(int criterion, bool pass, const std::string& detail) {
    std::cout << (pass ? "[PASS]" : "[FAIL]") << " criterion " << criterion << ": " << detail
              << "\n";
    if (!pass) ++failures;
  }
};

ModelConfig toy_config() {
  ModelConfig c;  // the documented desk-scale defaults
  c.embedding_size = 256;
  c.width = 64;
  c.layers = 4;
  c.ffn_size = 128;
  c.ffn_factor = 2;
  c.heads = 4;
  c.experts = 4;
  c.top_k = 2;
  c.placement = MoePlacement::kInterval;
  c.moe_layers = 2;
  c.capacity_factor = 1.5;
  c.pseudo_image_tokens = 16;
  c.alpha = 0.01;
  c.image_feature_dim = 32;
  c.max_seq_len = 64;
  return c;
}

SyntheticDataset toy_data(std::uint64_t seed) {
  return make_synthetic_dataset(seed, 8, 16, 4, 4, 512, 32, 256);
}

PipelineSpecs toy_specs() {
  PipelineSpecs specs;
  specs.stage1 = {Stage::kI, 60, 3e-3, LrSchedule::kCosine, TunedSubset::kMoe, 8};
  specs.stage2 = {Stage::kII, 100, 1e-3, LrSchedule::kCosine, TunedSubset::kMoe, 8};
  specs.stage3 = {Stage::kIII, 500, 2e-3, LrSchedule::kCosine, TunedSubset::kMoe, 8};
  return specs;
}

// --- criterion 1: parameter-count reproduction -------------------------------

void criterion_params(Checker& check) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> names{
      "stablelm-1.6b",        "moe-stablelm-1.6b-x4-top2", "moe-stablelm-1.6b-x4-top2-all",
      "qwen-1.8b",            "moe-qwen-1.8b-x4-top2",     "moe-qwen-1.8b-x4-top2-all",
      "phi2-2.7b",            "moe-phi2-2.7b-x4-top2",     "moe-phi2-2.7b-x4-top2-all",
      "openchat-7b",          "moe-openchat-7b-x4-top2",   "moe-openchat-7b-x4-top2-all"};
  bool all_ok = true;
  std::map<std::string, ParamCount> counts;
  std::map<std::string, RunConfig> configs;
  for (const std::string& name : names) {
    const std::string path = std::string(MOEKIT_CONFIG_DIR) + "/reference/" + name + ".json";
    RunConfig rc = load_run_config(path);
    configs[name] = rc;
    counts[name] = count_parameters(rc.model);
  }
  for (const std::string& name : names) {
    const RunConfig& rc = configs[name];
    const ParamCount& pc = counts[name];
    const double act_b = static_cast<double>(pc.activated) / 1e9;
    const double tot_b = static_cast<double>(pc.total) / 1e9;
    bool ok;
    std::ostringstream detail;
    if (rc.model.kv_width == 0) {
      ok = std::abs(act_b - *rc.reported_activated_b) <= 0.1 &&
           std::abs(tot_b - *rc.reported_total_b) <= 0.1;
      detail << name << " activated " << act_b << "e9 vs " << *rc.reported_activated_b
             << "e9, total " << tot_b << "e9 vs " << *rc.reported_total_b << "e9";
    } else {
      // documented caveat: the reduced-kv family's published dense base is
      // not derivable from the closed form, so its sparse rows are checked
      // as increments over that base
      const std::string base_name = "openchat-7b";
      const ParamCount& base = counts[base_name];
      const RunConfig& base_rc = configs[base_name];
      const double d_act = static_cast<double>(pc.activated - base.activated) / 1e9;
      const double d_tot = static_cast<double>(pc.total - base.total) / 1e9;
      const double rep_d_act = *rc.reported_activated_b - *base_rc.reported_activated_b;
      const double rep_d_tot = *rc.reported_total_b - *base_rc.reported_total_b;
      ok = std::abs(d_act - rep_d_act) <= 0.1 && std::abs(d_tot - rep_d_tot) <= 0.1;
      detail << name << " (kv-width caveat row) increment " << d_act << "/" << d_tot
             << "e9 vs published " << rep_d_act << "/" << rep_d_tot << "e9";
    }
    all_ok = all_ok && ok;
    check.report(1, ok, detail.str());
  }
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  check.report(1, ms < 1000, "all reference rows evaluated in " + std::to_string(ms) + " ms");
  (void)all_ok;
}

// --- criterion 2: balance-loss anchors ---------------------------------------

void criterion_aux_anchors(Checker& check) {
  const std::size_t tokens = 24, experts = 4;
  Tensor uniform = Tensor::full({tokens, experts}, 1.0 / static_cast<double>(experts));
  std::vector<std::size_t> balanced(tokens);
  for (std::size_t t = 0; t < tokens; ++t) balanced[t] = t % experts;
  const double balanced_loss = aux_loss(uniform, balanced).item();
  check.report(2, std::abs(balanced_loss - 1.0) <= 1e-12,
               "uniform balanced routing scores " + std::to_string(balanced_loss));

  std::vector<double> onehot(tokens * experts, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) onehot[t * experts + 2] = 1.0;
  const double concentrated =
      aux_loss(Tensor::from_values({tokens, experts}, onehot),
               std::vector<std::size_t>(tokens, 2))
          .item();
  check.report(2, std::abs(concentrated - static_cast<double>(experts)) <= 1e-12,
               "fully concentrated routing scores " + std::to_string(concentrated));
}

// --- criterion 3: gradient correctness ---------------------------------------

void criterion_gradients(Checker& check) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig c = toy_config();
  c.router_init = RouterInit::kSmallRandom;     // distinct gates: stable selections under fd
  c.capacity_factor = 2.0;                      // slack: no kept-flag flips under fd
  ToyModel model = ToyModel::build(c, 12345);
  SyntheticDataset data = toy_data(5);
  std::vector<ModelInput> batch;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  for (int i = 0; i < 2; ++i) {
    batch.push_back(to_model_input(data.samples[i], data.pseudo_image_tokens,
                                   data.image_feature_dim));
    append_targets(data.samples[i], data.pseudo_image_tokens, data.prompt_len, ids, mask);
  }
  for (NamedParam& p : model.parameters()) p.tensor.set_requires_grad(true);
  auto loss_fn = [&] {
    ForwardOutput out = model.forward(batch);
    Tensor reg = autoregressive_loss(out.logits, ids, mask);
    std::vector<Tensor> aux;
    for (std::size_t l = 0; l < out.gate_probs.size(); ++l) {
      std::vector<std::size_t> top1;
      for (const auto& d : out.decisions[l]) top1.push_back(d.selected.front());
      aux.push_back(aux_loss(out.gate_probs[l], top1));
    }
    return total_loss(reg, aux, c.alpha).total;
  };
  struct Probe {
    const char* group;
    Tensor tensor;
  };
  Block& moe_block = model.blocks[1];
  const std::vector<Probe> probes{
      {"router", moe_block.ensemble->router.weight},
      {"expert", moe_block.ensemble->experts[0].w1},
      {"expert", moe_block.ensemble->experts[2].w2},
      {"attention", model.blocks[0].wq},
      {"attention", model.blocks[2].wo},
      {"projector", model.proj_w1},
      {"projector", model.proj_b2},
  };
  double worst = 0.0;
  for (const Probe& probe : probes) {
    const double err = oracles::max_rel_grad_error(loss_fn, {probe.tensor}, 1e-5, 6);
    worst = std::max(worst, err);
  }
  const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream detail;
  detail << "worst relative gradient error " << worst << " (tolerance 1e-4), " << secs << " s";
  check.report(3, worst < 1e-4 && secs < 60.0, detail.str());
}

// --- criterion 4: sparse-expansion handoff -----------------------------------

void criterion_handoff(Checker& check) {
  ModelConfig c = toy_config();
  c.capacity_factor = 2.0;  // slack so every selected assignment is kept
  ToyModel dense = ToyModel::build_dense(c, 777);
  SyntheticDataset data = toy_data(7);
  std::vector<ModelInput> batch;
  for (int i = 0; i < 3; ++i)
    batch.push_back(to_model_input(data.samples[i], data.pseudo_image_tokens,
                                   data.image_feature_dim));

  // k = E: the expanded model reproduces its dense parent
  ToyModel same = expand_to_moe(dense, 4, 4, 1.0);
  auto ld = dense.forward(batch).logits;
  auto ls = same.forward(batch).logits;
  double max_diff = 0.0;
  for (std::size_t i = 0; i < ld.size(); ++i)
    max_diff = std::max(max_diff, std::abs(ld.values()[i] - ls.values()[i]));
  check.report(4, max_diff < 1e-9,
               "k = E expansion matches the dense parent, max |delta| = " +
                   std::to_string(max_diff));

  // k < E: every expert layer computes exactly (k/E) * FFN(x)
  ToyModel moe = expand_to_moe(dense, c.experts, c.top_k, c.capacity_factor);
  std::mt19937_64 rng(9);
  double worst = 0.0;
  const auto mask = c.moe_block_mask();
  for (std::size_t i = 0; i < c.layers; ++i) {
    if (!mask[i]) continue;
    TokenBatch tb;
    tb.hidden = Tensor::from_values({10, c.width}, oracles::random_values(10 * c.width, rng));
    tb.modality.assign(10, Modality::kText);
    tb.position.assign(10, 0);
    Tensor sparse_out = moe_forward(tb, *moe.blocks[i].ensemble).output;
    Tensor ffn_out = dense.blocks[i].ffn->forward(tb.hidden);
    const double ratio = static_cast<double>(c.top_k) / static_cast<double>(c.experts);
    for (std::size_t j = 0; j < ffn_out.size(); ++j)
      worst = std::max(worst,
                       std::abs(sparse_out.values()[j] - ratio * ffn_out.values()[j]));
  }
  check.report(4, worst < 1e-9,
               "expert layers scale the parent FFN by k/E, max |delta| = " +
                   std::to_string(worst));
}

// --- criterion 5: freezing contract -------------------------------------------

std::map<std::string, std::vector<double>> snapshot(const ToyModel& m) {
  std::map<std::string, std::vector<double>> snap;
  for (const NamedParam& p : m.parameters())
    snap[p.name] = {p.tensor.values().begin(), p.tensor.values().end()};
  return snap;
}

void criterion_freezing(Checker& check) {
  ModelConfig c = toy_config();
  SyntheticDataset data = toy_data(11);
  struct Case {
    const char* label;
    StageSpec spec;
    bool sparse_model;
  };
  const std::vector<Case> cases{
      {"stage I", {Stage::kI, 2, 1e-3, LrSchedule::kConstant, TunedSubset::kMoe, 4}, false},
      {"stage II", {Stage::kII, 2, 1e-3, LrSchedule::kConstant, TunedSubset::kMoe, 4}, false},
      {"stage III / moe", {Stage::kIII, 2, 1e-3, LrSchedule::kConstant, TunedSubset::kMoe, 4},
       true},
      {"stage III / ffn+moe",
       {Stage::kIII, 2, 1e-3, LrSchedule::kConstant, TunedSubset::kFfnMoe, 4}, true},
      {"stage III / all", {Stage::kIII, 2, 1e-3, LrSchedule::kConstant, TunedSubset::kAll, 4},
       true},
  };
  for (const Case& cs : cases) {
    ToyModel model = cs.sparse_model ? ToyModel::build(c, 31) : ToyModel::build_dense(c, 31);
    std::map<std::string, bool> trainable;
    for (const NamedParam& p : trainable_parameters(model, cs.spec)) trainable[p.name] = true;
    auto before = snapshot(model);
    run_stage(model, cs.spec, data, 17);
    auto after = snapshot(model);
    bool frozen_ok = true;
    std::size_t frozen_count = 0;
    for (const NamedParam& p : model.parameters()) {
      if (trainable.count(p.name)) continue;
      ++frozen_count;
      frozen_ok = frozen_ok &&
                  std::memcmp(before[p.name].data(), after[p.name].data(),
                              before[p.name].size() * sizeof(double)) == 0;
    }
    std::ostringstream detail;
    detail << cs.label << ": " << frozen_count << " frozen buffers bitwise identical";
    check.report(5, frozen_ok, detail.str());
  }
}

// --- criterion 6: oracle equivalence ------------------------------------------

void criterion_oracles(Checker& check) {
  std::mt19937_64 rng(2024);
  auto random_prob_row = [&rng](std::size_t e) {
    return oracles::softmax_direct(oracles::random_values(e, rng));
  };

  // select_top_k vs full sort
  std::size_t bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t e = 2 + rng() % 7, k = 1 + rng() % e;
    auto row = random_prob_row(e);
    auto d = select_top_k(row, k);
    std::vector<std::size_t> order(e);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    for (std::size_t i = 0; i < k; ++i)
      if (d.selected[i] != order[i] || d.gate[i] != row[order[i]]) ++bad;
  }
  check.report(6, bad == 0, "select_top_k equals the sort oracle on 1000 instances");

  // apply_capacity vs an independent replay
  bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t e = 2 + rng() % 4, k = 1 + rng() % e, tokens = 3 + rng() % 20;
    const double c = 0.25 * static_cast<double>(1 + rng() % 10);
    std::vector<RoutingDecision> decisions;
    for (std::size_t t = 0; t < tokens; ++t) decisions.push_back(select_top_k(random_prob_row(e), k));
    auto replay = decisions;
    apply_capacity(decisions, c, e);
    // replay: stable ranking by (gate desc, token asc) per expert
    const std::size_t cap = expert_capacity(c, k, tokens, e);
    std::vector<std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>>> lists(e);
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t s = 0; s < k; ++s)
        lists[replay[t].selected[s]].push_back({replay[t].gate[s], {t, s}});
    for (auto& lst : lists) {
      std::sort(lst.begin(), lst.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second.first < b.second.first;
      });
      for (std::size_t r = 0; r < lst.size(); ++r) {
        const bool expect_kept = r < cap;
        const auto [t, s] = lst[r].second;
        if (decisions[t].kept[s] != expect_kept) ++bad;
      }
    }
  }
  check.report(6, bad == 0, "apply_capacity equals the ranking replay on 1000 batches");

  // aux_loss vs brute force
  bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t tokens = 2 + rng() % 12, e = 2 + rng() % 5;
    std::vector<double> probs(tokens * e);
    std::vector<std::size_t> top1(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      auto row = random_prob_row(e);
      top1[t] = static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      std::copy(row.begin(), row.end(), probs.begin() + t * e);
    }
    const double got = aux_loss(Tensor::from_values({tokens, e}, probs), top1).item();
    const double ref = oracles::balance_loss_direct(probs, tokens, e, top1);
    if (std::abs(got - ref) > 1e-12) ++bad;
  }
  check.report(6, bad == 0, "aux_loss matches brute force within 1e-12 on 1000 matrices");

  // moe_forward vs a fully independent evaluation
  bad = 0;
  auto gelu_ref = [](double v) {
    const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
    return 0.5 * v * (1.0 + std::tanh(u));
  };
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t d = 3 + rng() % 4, e = 2 + rng() % 3, k = 1 + rng() % e,
                      tokens = 2 + rng() % 4;
    const std::size_t factor = rep % 2 == 0 ? 2 : 3;
    std::mt19937_64 init_rng(rng());
    Ffn proto = Ffn::init(d, d + 2, factor, init_rng);
    ExpertEnsemble ens = init_from_ffn(proto, e, k, 1.0, RouterInit::kSmallRandom, init_rng);
    for (std::size_t ei = 0; ei < e; ++ei) {
      auto w = ens.experts[ei].out_bias.values_mut();
      for (auto& v : w) v += 0.2 * static_cast<double>(ei);
    }
    auto xv = oracles::random_values(tokens * d, rng);
    TokenBatch tb;
    tb.hidden = Tensor::from_values({tokens, d}, xv);
    tb.modality.assign(tokens, Modality::kText);
    tb.position.assign(tokens, 0);
    MoeForwardResult res = moe_forward(tb, ens);

    const auto wv = ens.router.weight.values();
    const std::size_t h = d + 2;
    std::vector<std::vector<double>> probs(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      std::vector<double> logits(e, 0.0);
      for (std::size_t j = 0; j < e; ++j)
        for (std::size_t i = 0; i < d; ++i) logits[j] += xv[t * d + i] * wv[i * e + j];
      probs[t] = oracles::softmax_direct(logits);
    }
    std::vector<std::vector<std::size_t>> chosen(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      std::vector<std::size_t> order(e);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return probs[t][a] > probs[t][b];
      });
      chosen[t].assign(order.begin(), order.begin() + k);
    }
    const std::size_t cap = expert_capacity(1.0, k, tokens, e);
    std::vector<std::vector<std::pair<double, std::size_t>>> lists(e);
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t s = 0; s < k; ++s)
        lists[chosen[t][s]].push_back({probs[t][chosen[t][s]], t});
    std::vector<std::vector<bool>> kept(tokens, std::vector<bool>(k, true));
    for (std::size_t ei = 0; ei < e; ++ei) {
      auto& lst = lists[ei];
      std::sort(lst.begin(), lst.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (std::size_t r = cap; r < lst.size(); ++r)
        for (std::size_t s = 0; s < k; ++s)
          if (chosen[lst[r].second][s] == ei) kept[lst[r].second][s] = false;
    }
    auto eval_ffn = [&](const Ffn& f, std::size_t t) {
      std::vector<double> xb(d);
      for (std::size_t i = 0; i < d; ++i) xb[i] = xv[t * d + i] + f.in_bias.values()[i];
      std::vector<double> mid(h);
      for (std::size_t j = 0; j < h; ++j) {
        double u1 = 0.0, u3 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          u1 += xb[i] * f.w1.values()[i * h + j];
          if (factor == 3) u3 += xb[i] * f.w3.values()[i * h + j];
        }
        mid[j] = factor == 3 ? gelu_ref(u1) * u3 : gelu_ref(u1);
      }
      std::vector<double> y(d);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = f.out_bias.values()[i];
        for (std::size_t j = 0; j < h; ++j) acc += mid[j] * f.w2.values()[j * d + i];
        y[i] = acc;
      }
      return y;
    };
    for (std::size_t t = 0; t < tokens && bad == 0; ++t) {
      std::vector<double> ref(d, 0.0);
      for (std::size_t s = 0; s < k; ++s) {
        if (!kept[t][s]) continue;
        auto y = eval_ffn(ens.experts[chosen[t][s]], t);
        for (std::size_t i = 0; i < d; ++i) ref[i] += probs[t][chosen[t][s]] * y[i];
      }
      for (std::size_t i = 0; i < d; ++i)
        if (std::abs(res.output.values()[t * d + i] - ref[i]) >
            1e-12 * std::max(1.0, std::abs(ref[i])))
          ++bad;
    }
  }
  check.report(6, bad == 0, "moe_forward matches the brute-force route on 1000 instances");

  // load distribution + modality preference vs counting
  bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t tokens = 2 + rng() % 30, e = 2 + rng() % 5;
    LayerTrace layer;
    layer.num_experts = e;
    layer.top_k = 1;
    layer.probs.resize(tokens * e);
    layer.modality.resize(tokens);
    layer.position.resize(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      auto row = random_prob_row(e);
      std::copy(row.begin(), row.end(), layer.probs.begin() + t * e);
      layer.selected.push_back(static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin()));
      layer.kept.push_back(1);
      layer.modality[t] = rng() % 2 == 0 ? Modality::kText : Modality::kImage;
      layer.position[t] = t;
    }
    RoutingTrace trace;
    trace.layers.push_back(layer);
    auto loads = expert_load_distribution(trace)[0];
    auto prefs = modality_preference(trace)[0];
    std::vector<std::size_t> counts(e, 0), text(e, 0);
    for (std::size_t t = 0; t < tokens; ++t) {
      ++counts[layer.selected[t]];
      if (layer.modality[t] == Modality::kText) ++text[layer.selected[t]];
    }
    for (std::size_t i = 0; i < e; ++i) {
      if (loads[i] != static_cast<double>(counts[i]) / static_cast<double>(tokens)) ++bad;
      if (counts[i] == 0) {
        if (prefs[i].active) ++bad;
      } else {
        if (!prefs[i].active ||
            prefs[i].text_fraction !=
                static_cast<double>(text[i]) / static_cast<double>(counts[i]))
          ++bad;
      }
    }
  }
  check.report(6, bad == 0,
               "expert loads and modality preferences match counting on 1000 traces");
}

// --- criterion 7: desk-scale training behavior --------------------------------

double eval_regressive(const ToyModel& model, const SyntheticDataset& data, std::size_t n) {
  std::vector<ModelInput> batch;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  for (std::size_t i = 0; i < n; ++i) {
    batch.push_back(to_model_input(data.samples[i], data.pseudo_image_tokens,
                                   data.image_feature_dim));
    append_targets(data.samples[i], data.pseudo_image_tokens, data.prompt_len, ids, mask);
  }
  ForwardOutput out = model.forward(batch);
  return autoregressive_loss(out.logits, ids, mask).item();
}

void criterion_training(Checker& check) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig base = toy_config();
  const PipelineSpecs specs = toy_specs();
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  int alpha_wins = 0;
  int staging_wins = 0;
  double canonical_first = 0.0, canonical_last = 0.0;

  // The staging comparison holds the sparsification script fixed (a short
  // full-parameter run) and varies only the initialization: staged general
  // tuning vs from scratch. Both arms see the same batch stream.
  StageSpec transition{Stage::kIII, 100, 1e-3, LrSchedule::kCosine, TunedSubset::kAll, 8};

  for (std::size_t si = 0; si < seeds.size(); ++si) {
    const std::uint64_t seed = seeds[si];
    SyntheticDataset data = toy_data(seed);

    // shared dense prefix: stages I and II
    ToyModel dense = ToyModel::build_dense(base, seed);
    run_stage(dense, specs.stage1, data, seed * 11 + 1);
    run_stage(dense, specs.stage2, data, seed * 11 + 2);

    ToyModel with_alpha = expand_to_moe(dense, base.experts, base.top_k, base.capacity_factor,
                                        base.router_init, seed);
    ToyModel without_alpha = with_alpha.clone();
    ToyModel staged = with_alpha.clone();
    without_alpha.config.alpha = 0.0;

    StageResult r_alpha = run_stage(with_alpha, specs.stage3, data, seed * 11 + 3);
    StageResult r_plain = run_stage(without_alpha, specs.stage3, data, seed * 11 + 3);

    auto final_max_load = [](const StageResult& r) {
      return r.timeline.back().max_load_fraction;
    };
    if (final_max_load(r_alpha) < final_max_load(r_plain)) ++alpha_wins;

    if (seed == 0) {
      canonical_first = r_alpha.timeline.front().regressive;
      canonical_last = r_alpha.timeline.back().regressive;
    }

    run_stage(staged, transition, data, seed * 11 + 9);
    ToyModel scratch = ToyModel::build(base, seed);
    run_stage(scratch, transition, data, seed * 11 + 9);
    if (eval_regressive(staged, data, 64) <= eval_regressive(scratch, data, 64)) ++staging_wins;
  }

  std::ostringstream d1;
  d1 << "stage III regressive loss " << canonical_first << " -> " << canonical_last << " ("
     << 100.0 * canonical_last / canonical_first << "% of initial, threshold 50%)";
  check.report(7, canonical_last <= 0.5 * canonical_first, d1.str());
  check.report(7, alpha_wins >= 4,
               "balance loss lowers the final max expert load in " + std::to_string(alpha_wins) +
                   "/5 seeds (need >= 4)");
  check.report(7, staging_wins >= 4,
               "staged init beats from-scratch init under the same sparsification budget in " +
                   std::to_string(staging_wins) + "/5 seeds (need >= 4)");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  check.report(7, secs < 600.0, "training criterion finished in " + std::to_string(secs) +
                                    " s (budget 600 s)");
}

// --- criterion 8: capacity monotonicity ----------------------------------------

void criterion_capacity(Checker& check) {
  std::mt19937_64 rng(404);
  bool monotone = true, zero_at_slack = true, bounded = true;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t e = 2 + rng() % 4, k = 1 + rng() % e, tokens = 8 + rng() % 32;
    std::vector<RoutingDecision> base;
    for (std::size_t t = 0; t < tokens; ++t)
      base.push_back(select_top_k(oracles::softmax_direct(oracles::random_values(e, rng)), k));
    double prev = 1.0 + 1e-9;
    for (double c : {0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 4.0}) {
      auto decisions = base;
      apply_capacity(decisions, c, e);
      const double rate = drop_rate(decisions);
      monotone = monotone && rate <= prev + 1e-12;
      prev = rate;
      const double raw_cap = c * static_cast<double>(k) * static_cast<double>(tokens) /
                             static_cast<double>(e);
      const auto floor_cap = static_cast<std::size_t>(raw_cap);
      if (floor_cap >= 1) {
        std::vector<std::size_t> kept(e, 0);
        for (const auto& d : decisions)
          for (std::size_t s = 0; s < d.selected.size(); ++s)
            if (d.kept[s]) ++kept[d.selected[s]];
        for (std::size_t i = 0; i < e; ++i) bounded = bounded && kept[i] <= floor_cap;
      }
    }
    auto slack = base;
    apply_capacity(slack, static_cast<double>(e) / static_cast<double>(k), e);
    zero_at_slack = zero_at_slack && drop_rate(slack) == 0.0;
  }
  check.report(8, monotone, "drop rate is non-increasing in the capacity factor");
  check.report(8, zero_at_slack, "drop rate is zero once capacity_factor >= E/k");
  check.report(8, bounded, "per-expert kept count never exceeds floor(c*k*K/E)");
}

// --- criterion 9: pathway sanity ------------------------------------------------

void criterion_pathways(Checker& check) {
  // constructed two-cluster trace
  std::mt19937_64 rng(505);
  const std::size_t experts = 4, tokens = 40;
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  auto layer_from = [&](bool swap) {
    LayerTrace layer;
    layer.num_experts = experts;
    layer.top_k = 2;
    layer.probs.resize(tokens * experts);
    layer.modality.resize(tokens);
    layer.position.resize(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      const bool text = t < tokens / 2;
      layer.modality[t] = text ? Modality::kText : Modality::kImage;
      layer.position[t] = t;
      const double j = jitter(rng);
      double row[4];
      if (text) {
        row[0] = swap ? 0.54 - j : 0.42 + j;
        row[1] = swap ? 0.42 + j : 0.54 - j;
        row[2] = 0.02;
        row[3] = 0.02;
      } else {
        row[0] = 0.02;
        row[1] = 0.02;
        row[2] = swap ? 0.42 - j : 0.54 + j;
        row[3] = swap ? 0.54 + j : 0.42 - j;
      }
      for (std::size_t e2 = 0; e2 < experts; ++e2) layer.probs[t * experts + e2] = row[e2];
      auto d = select_top_k({row, row + experts}, 2);
      layer.selected.insert(layer.selected.end(), d.selected.begin(), d.selected.end());
      layer.kept.push_back(1);
      layer.kept.push_back(1);
    }
    return layer;
  };
  RoutingTrace trace;
  trace.layers.push_back(layer_from(false));
  trace.layers.push_back(layer_from(true));
  PathwayReport report = token_pathways(trace, 10);
  bool disjoint = report.pathways.size() >= 2;
  if (disjoint)
    for (std::size_t ea : report.pathways[0].experts)
      for (std::size_t eb : report.pathways[1].experts) disjoint = disjoint && ea != eb;
  check.report(9, disjoint, "two-cluster trace yields disjoint top-2 pathway expert sets");

  double worst_cos = 1.0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t rows = 50, cols = 8;
    auto data = oracles::random_values(rows * cols, rng);
    PcaResult pca = first_principal_component(data, rows, cols);
    auto ref = oracles::power_iteration_pc1(data, rows, cols);
    worst_cos = std::min(worst_cos, std::abs(oracles::cosine_similarity(pca.component, ref)));
  }
  std::ostringstream detail;
  detail << "first component vs power iteration, worst |cosine| = " << worst_cos
         << " (threshold 0.999)";
  check.report(9, worst_cos > 0.999, detail.str());
}

}  // namespace

int main() {
  Checker check;
  criterion_params(check);
  criterion_aux_anchors(check);
  criterion_gradients(check);
  criterion_handoff(check);
  criterion_freezing(check);
  criterion_oracles(check);
  criterion_training(check);
  criterion_capacity(check);
  criterion_pathways(check);
  if (check.failures == 0) {
    std::cout << "acceptance: all criteria passed\n";
    return 0;
  }
  std::cout << "acceptance: " << check.failures << " check(s) failed\n";
  return 1;
}
