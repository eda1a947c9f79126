// SPDX-License-Identifier: Apache-2.0

#include "moekit/objectives.hpp"

#include <numeric>

namespace moekit {

Tensor autoregressive_loss(const Tensor& logits, const std::vector<int>& next_ids,
                           const std::vector<std::uint8_t>& predict_mask) {
  const std::size_t rows = logits.rows();
  const std::size_t vocab = logits.cols();
  if (next_ids.size() != rows || predict_mask.size() != rows)
    throw ShapeError("autoregressive_loss: targets/mask must match logit rows");
  std::vector<std::size_t> picked_rows;
  std::vector<std::size_t> picked_cols;
  for (std::size_t j = 0; j < rows; ++j) {
    if (!predict_mask[j]) continue;
    if (next_ids[j] < 0 || static_cast<std::size_t>(next_ids[j]) >= vocab)
      throw ShapeError("autoregressive_loss: target id out of vocabulary");
    picked_rows.push_back(j);
    picked_cols.push_back(static_cast<std::size_t>(next_ids[j]));
  }
  if (picked_rows.empty())
    throw ShapeError("autoregressive_loss: all positions masked out, mean undefined");
  Tensor lp = log_softmax_rows(gather_rows(logits, picked_rows));
  std::vector<std::size_t> local(picked_rows.size());
  std::iota(local.begin(), local.end(), 0);
  Tensor nll = gather_elements(lp, std::move(local), std::move(picked_cols));
  return scale(mean(nll), -1.0);
}

namespace {

Tensor balance_from_fractions(const Tensor& probs, const std::vector<double>& fractions) {
  const std::size_t tokens = probs.rows();
  const std::size_t experts = probs.cols();
  // G = (1/K) 1^T P as a [1 x E] matrix, differentiable through P; the loss
  // is E * (G . F) with F a constant column.
  Tensor ones_row = Tensor::full({1, tokens}, 1.0 / static_cast<double>(tokens));
  Tensor g = matmul(ones_row, probs);
  Tensor f_col = Tensor::from_values({experts, 1}, fractions);
  return scale(sum(matmul(g, f_col)), static_cast<double>(experts));
}

}  // namespace

Tensor aux_loss(const Tensor& probs, const std::vector<std::size_t>& top1) {
  const std::size_t tokens = probs.rows();
  const std::size_t experts = probs.cols();
  if (tokens == 0) throw ShapeError("aux_loss: needs at least one token");
  if (top1.size() != tokens) throw ShapeError("aux_loss: one selection per token required");
  std::vector<double> fractions(experts, 0.0);
  for (std::size_t sel : top1) {
    if (sel >= experts) throw ShapeError("aux_loss: selection out of range");
    fractions[sel] += 1.0 / static_cast<double>(tokens);
  }
  return balance_from_fractions(probs, fractions);
}

Tensor aux_loss_all_assignments(const Tensor& probs,
                                const std::vector<std::vector<std::size_t>>& assignments) {
  const std::size_t tokens = probs.rows();
  const std::size_t experts = probs.cols();
  if (tokens == 0) throw ShapeError("aux_loss: needs at least one token");
  if (assignments.size() != tokens)
    throw ShapeError("aux_loss: one assignment list per token required");
  std::size_t total = 0;
  for (const auto& a : assignments) total += a.size();
  if (total == 0) throw ShapeError("aux_loss: no assignments");
  std::vector<double> fractions(experts, 0.0);
  for (const auto& a : assignments)
    for (std::size_t sel : a) {
      if (sel >= experts) throw ShapeError("aux_loss: selection out of range");
      fractions[sel] += 1.0 / static_cast<double>(total);
    }
  return balance_from_fractions(probs, fractions);
}

TotalLoss total_loss(const Tensor& regressive, const std::vector<Tensor>& aux_per_layer,
                     double alpha) {
  TotalLoss out;
  out.report.regressive = regressive.item();
  out.report.alpha = alpha;
  if (aux_per_layer.empty()) {
    out.total = regressive;
    out.report.total = out.report.regressive;
    return out;
  }
  Tensor acc;
  for (std::size_t i = 0; i < aux_per_layer.size(); ++i) {
    out.report.aux_per_layer.push_back(aux_per_layer[i].item());
    acc = i == 0 ? aux_per_layer[i] : add(acc, aux_per_layer[i]);
  }
  out.total = add(regressive, scale(acc, alpha / static_cast<double>(aux_per_layer.size())));
  out.report.total = out.total.item();
  return out;
}

}  // namespace moekit
