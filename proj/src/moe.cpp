// SPDX-License-Identifier: Apache-2.0

#include "moekit/moe.hpp"

#include <cmath>

namespace moekit {

namespace {

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng, bool trainable) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), trainable);
}

}  // namespace

Ffn Ffn::init(std::size_t width, std::size_t hidden, std::size_t factor,
              std::mt19937_64& rng, bool trainable) {
  if (factor != 2 && factor != 3) throw ShapeError("ffn: factor must be 2 or 3");
  Ffn f;
  f.width = width;
  f.hidden = hidden;
  f.factor = factor;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(width));
  const double std_out = 1.0 / std::sqrt(static_cast<double>(hidden));
  f.in_bias = Tensor::zeros({width}, trainable);
  f.w1 = normal_init({width, hidden}, std_in, rng, trainable);
  if (factor == 3) f.w3 = normal_init({width, hidden}, std_in, rng, trainable);
  f.w2 = normal_init({hidden, width}, std_out, rng, trainable);
  f.out_bias = Tensor::zeros({width}, trainable);
  return f;
}

Tensor Ffn::forward(const Tensor& x) const {
  Tensor xb = add_rowwise(x, in_bias);
  Tensor h;
  if (factor == 3) {
    h = mul(gelu(matmul(xb, w1)), matmul(xb, w3));
  } else {
    h = gelu(matmul(xb, w1));
  }
  return add_rowwise(matmul(h, w2), out_bias);
}

Ffn Ffn::clone() const {
  Ffn f;
  f.width = width;
  f.hidden = hidden;
  f.factor = factor;
  f.in_bias = Tensor::from_values(in_bias.shape(), {in_bias.values().begin(), in_bias.values().end()},
                                  in_bias.requires_grad());
  f.w1 = Tensor::from_values(w1.shape(), {w1.values().begin(), w1.values().end()},
                             w1.requires_grad());
  if (factor == 3)
    f.w3 = Tensor::from_values(w3.shape(), {w3.values().begin(), w3.values().end()},
                               w3.requires_grad());
  f.w2 = Tensor::from_values(w2.shape(), {w2.values().begin(), w2.values().end()},
                             w2.requires_grad());
  f.out_bias = Tensor::from_values(out_bias.shape(),
                                   {out_bias.values().begin(), out_bias.values().end()},
                                   out_bias.requires_grad());
  return f;
}

std::vector<Tensor> Ffn::parameters() const {
  std::vector<Tensor> ps{in_bias, w1};
  if (factor == 3) ps.push_back(w3);
  ps.push_back(w2);
  ps.push_back(out_bias);
  return ps;
}

std::size_t Ffn::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : parameters()) n += p.size();
  return n;
}

std::vector<Tensor> ExpertEnsemble::parameters() const {
  std::vector<Tensor> ps;
  for (const Ffn& e : experts)
    for (const Tensor& p : e.parameters()) ps.push_back(p);
  ps.push_back(router.weight);
  return ps;
}

ExpertEnsemble init_from_ffn(const Ffn& ffn, std::size_t num_experts, std::size_t top_k,
                             double capacity_factor, RouterInit router_init,
                             std::mt19937_64& rng, bool renormalize_gates) {
  if (num_experts < 1) throw ShapeError("init_from_ffn: need at least one expert");
  ExpertEnsemble ens;
  ens.experts.reserve(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) ens.experts.push_back(ffn.clone());
  ens.router.num_experts = num_experts;
  ens.router.top_k = top_k;
  ens.router.capacity_factor = capacity_factor;
  ens.router.renormalize_gates = renormalize_gates;
  if (router_init == RouterInit::kZeros) {
    ens.router.weight = Tensor::zeros({ffn.width, num_experts}, true);
  } else {
    ens.router.weight = normal_init({ffn.width, num_experts}, 0.02, rng, true);
  }
  ens.router.validate();
  return ens;
}

MoeForwardResult moe_forward(const TokenBatch& batch, const ExpertEnsemble& ensemble,
                             LayerTrace* trace, MoeForwardStats* stats) {
  const RouterState& router = ensemble.router;
  router.validate();
  if (ensemble.experts.size() != router.num_experts)
    throw ShapeError("moe_forward: expert count does not match router");
  const std::size_t tokens = batch.tokens();
  const std::size_t width = batch.hidden.cols();
  const std::size_t num_experts = router.num_experts;

  MoeForwardResult res;
  res.gate_probs = route_probabilities(batch, router);
  const auto pv = res.gate_probs.values();
  res.decisions = select_top_k_batch({pv.begin(), pv.end()}, num_experts, router.top_k,
                                     router.renormalize_gates);
  apply_capacity(res.decisions, router.capacity_factor, num_experts);

  // Differentiable renormalization denominator: sum of the selected raw
  // probabilities per token.
  Tensor denom;
  if (router.renormalize_gates) {
    Tensor acc;
    for (std::size_t s = 0; s < router.top_k; ++s) {
      std::vector<std::size_t> rows(tokens), cols(tokens);
      for (std::size_t t = 0; t < tokens; ++t) {
        rows[t] = t;
        cols[t] = res.decisions[t].selected[s];
      }
      Tensor part = gather_elements(res.gate_probs, std::move(rows), std::move(cols));
      acc = s == 0 ? part : add(acc, part);
    }
    denom = acc;
  }

  Tensor out = Tensor::zeros({tokens, width});
  for (std::size_t e = 0; e < num_experts; ++e) {
    std::vector<std::size_t> routed;
    for (std::size_t t = 0; t < tokens; ++t) {
      const auto& d = res.decisions[t];
      for (std::size_t s = 0; s < d.selected.size(); ++s)
        if (d.selected[s] == e && d.kept[s]) routed.push_back(t);
    }
    if (routed.empty()) continue;
    Tensor xe = gather_rows(batch.hidden, routed);
    const std::uint64_t mac0 = mac_count();
    Tensor ye = ensemble.experts[e].forward(xe);
    if (stats) stats->expert_macs += mac_count() - mac0;
    std::vector<std::size_t> cols(routed.size(), e);
    Tensor gate = gather_elements(res.gate_probs, routed, std::move(cols));
    if (router.renormalize_gates) gate = div(gate, gather_rows(denom, routed));
    out = scatter_add_rows(out, routed, scale_rows(ye, gate));
  }
  res.output = out;

  if (stats) {
    for (const auto& d : res.decisions) {
      stats->total_assignments += d.kept.size();
      for (bool kp : d.kept)
        if (!kp) ++stats->dropped_assignments;
    }
  }
  if (trace) {
    trace->num_experts = num_experts;
    trace->top_k = router.top_k;
    trace->probs.assign(pv.begin(), pv.end());
    trace->selected.clear();
    trace->kept.clear();
    for (const auto& d : res.decisions) {
      trace->selected.insert(trace->selected.end(), d.selected.begin(), d.selected.end());
      for (bool kp : d.kept) trace->kept.push_back(kp ? 1 : 0);
    }
    trace->modality = batch.modality;
    trace->position = batch.position;
  }
  return res;
}

}  // namespace moekit
