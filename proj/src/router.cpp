// SPDX-License-Identifier: Apache-2.0

#include "moekit/router.hpp"

#include <algorithm>
#include <numeric>

namespace moekit {

void RouterState::validate() const {
  if (num_experts < 1) throw ShapeError("router: num_experts must be >= 1");
  if (top_k < 1 || top_k > num_experts) throw ShapeError("router: need 1 <= top_k <= num_experts");
  if (!(capacity_factor > 0.0)) throw ShapeError("router: capacity_factor must be positive");
  if (weight.defined() && weight.shape()[1] != num_experts)
    throw ShapeError("router: weight columns must equal num_experts");
}

Tensor route_probabilities(const TokenBatch& batch, const RouterState& state) {
  state.validate();
  if (batch.hidden.cols() != state.weight.shape()[0])
    throw ShapeError("route_probabilities: hidden width does not match router weight");
  return softmax(matmul(batch.hidden, state.weight), 1);
}

RoutingDecision select_top_k(const std::vector<double>& probs, std::size_t k,
                             bool renormalize) {
  const std::size_t e = probs.size();
  if (k > e) throw ShapeError("select_top_k: k exceeds expert count");
  std::vector<std::size_t> order(e);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;  // ties break to the lower expert index
  });
  RoutingDecision d;
  d.probs = probs;
  d.selected.assign(order.begin(), order.begin() + k);
  d.gate.reserve(k);
  for (std::size_t i = 0; i < k; ++i) d.gate.push_back(probs[d.selected[i]]);
  if (renormalize) {
    double s = std::accumulate(d.gate.begin(), d.gate.end(), 0.0);
    if (s > 0.0)
      for (double& g : d.gate) g /= s;
  }
  d.kept.assign(k, true);
  return d;
}

std::vector<RoutingDecision> select_top_k_batch(const std::vector<double>& probs,
                                                std::size_t num_experts, std::size_t k,
                                                bool renormalize) {
  if (num_experts == 0 || probs.size() % num_experts != 0)
    throw ShapeError("select_top_k_batch: bad probability matrix");
  const std::size_t tokens = probs.size() / num_experts;
  std::vector<RoutingDecision> out;
  out.reserve(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::vector<double> row(probs.begin() + t * num_experts,
                            probs.begin() + (t + 1) * num_experts);
    out.push_back(select_top_k(row, k, renormalize));
  }
  return out;
}

std::size_t expert_capacity(double capacity_factor, std::size_t top_k,
                            std::size_t tokens, std::size_t num_experts) {
  const double raw = capacity_factor * static_cast<double>(top_k) *
                     static_cast<double>(tokens) / static_cast<double>(num_experts);
  const auto cap = static_cast<std::size_t>(raw);
  return std::max<std::size_t>(1, cap);
}

void apply_capacity(std::vector<RoutingDecision>& decisions, double capacity_factor,
                    std::size_t num_experts) {
  if (decisions.empty()) return;
  const std::size_t k = decisions.front().selected.size();
  const std::size_t cap = expert_capacity(capacity_factor, k, decisions.size(), num_experts);

  struct Assignment {
    double gate;
    std::size_t token;
    std::size_t slot;  // index into the token's selected list
  };
  std::vector<std::vector<Assignment>> per_expert(num_experts);
  for (std::size_t t = 0; t < decisions.size(); ++t) {
    auto& d = decisions[t];
    d.kept.assign(d.selected.size(), true);
    for (std::size_t s = 0; s < d.selected.size(); ++s)
      per_expert[d.selected[s]].push_back({d.gate[s], t, s});
  }
  for (auto& assignments : per_expert) {
    std::sort(assignments.begin(), assignments.end(), [](const Assignment& a, const Assignment& b) {
      if (a.gate != b.gate) return a.gate > b.gate;
      return a.token < b.token;  // ties break to the lower token index
    });
    for (std::size_t r = cap; r < assignments.size(); ++r)
      decisions[assignments[r].token].kept[assignments[r].slot] = false;
  }
}

double drop_rate(const std::vector<RoutingDecision>& decisions) {
  std::size_t total = 0, dropped = 0;
  for (const auto& d : decisions) {
    total += d.kept.size();
    for (bool kp : d.kept)
      if (!kp) ++dropped;
  }
  return total == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(total);
}

}  // namespace moekit
