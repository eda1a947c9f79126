// SPDX-License-Identifier: Apache-2.0
//
// Python bindings over the main operations: parameter accounting, routing,
// balance loss, schedules, pathway PCA, and a seeded toy forward pass.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moekit/analytics.hpp"
#include "moekit/config.hpp"
#include "moekit/model.hpp"
#include "moekit/objectives.hpp"
#include "moekit/optim.hpp"
#include "moekit/router.hpp"
#include "moekit/tuning.hpp"

namespace py = pybind11;
using namespace moekit;

namespace {

std::pair<std::vector<double>, std::pair<std::size_t, std::size_t>> matrix_from(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(arr.shape(0));
  const auto cols = static_cast<std::size_t>(arr.shape(1));
  std::vector<double> v(arr.data(), arr.data() + rows * cols);
  return {std::move(v), {rows, cols}};
}

py::array_t<double> matrix_to(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  py::array_t<double> out({rows, cols});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::dict params_from_json(const std::string& config_json) {
  RunConfig rc = parse_run_config(config_json);
  const ParamCount pc = count_parameters(rc.model);
  py::dict d;
  d["name"] = rc.model.name;
  d["activated"] = pc.activated;
  d["total"] = pc.total;
  d["activated_b"] = static_cast<double>(pc.activated) / 1e9;
  d["total_b"] = static_cast<double>(pc.total) / 1e9;
  return d;
}

py::tuple route_top_k(const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
                      std::size_t k, bool renormalize) {
  auto [v, shape] = matrix_from(probs);
  const auto [tokens, experts] = shape;
  auto decisions = select_top_k_batch(v, experts, k, renormalize);
  py::array_t<std::int64_t> idx({tokens, k});
  py::array_t<double> gates({tokens, k});
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t s = 0; s < k; ++s) {
      idx.mutable_at(t, s) = static_cast<std::int64_t>(decisions[t].selected[s]);
      gates.mutable_at(t, s) = decisions[t].gate[s];
    }
  return py::make_tuple(idx, gates);
}

py::tuple capacity_kept(const py::array_t<double, py::array::c_style | py::array::forcecast>& probs,
                        std::size_t k, double capacity_factor) {
  auto [v, shape] = matrix_from(probs);
  const auto [tokens, experts] = shape;
  auto decisions = select_top_k_batch(v, experts, k, false);
  apply_capacity(decisions, capacity_factor, experts);
  py::array_t<bool> kept({tokens, k});
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t s = 0; s < k; ++s) kept.mutable_at(t, s) = decisions[t].kept[s];
  return py::make_tuple(kept, drop_rate(decisions));
}

double balance_loss(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& probs) {
  auto [v, shape] = matrix_from(probs);
  const auto [tokens, experts] = shape;
  std::vector<std::size_t> top1(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::size_t best = 0;
    for (std::size_t e = 1; e < experts; ++e)
      if (v[t * experts + e] > v[t * experts + best]) best = e;
    top1[t] = best;
  }
  return aux_loss(Tensor::from_values({tokens, experts}, v), top1).item();
}

py::array_t<double> softmax_py(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& x, std::size_t axis) {
  auto [v, shape] = matrix_from(x);
  Tensor t = softmax(Tensor::from_values({shape.first, shape.second}, v), axis);
  return matrix_to({t.values().begin(), t.values().end()}, shape.first, shape.second);
}

py::array_t<double> vector_to(const std::vector<double>& v) {
  py::array_t<double> out(py::array::ShapeContainer{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<double> gelu_py(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
  std::vector<double> v(x.data(), x.data() + x.size());
  Tensor t = gelu(Tensor::from_values({v.size()}, v));
  return vector_to({t.values().begin(), t.values().end()});
}

py::array_t<double> layer_norm_py(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
    const std::vector<double>& gain, const std::vector<double>& bias, double eps) {
  auto [v, shape] = matrix_from(x);
  Tensor t = layer_norm(Tensor::from_values({shape.first, shape.second}, v),
                        Tensor::from_values({gain.size()}, gain),
                        Tensor::from_values({bias.size()}, bias), eps);
  return matrix_to({t.values().begin(), t.values().end()}, shape.first, shape.second);
}

py::tuple pca_first_component(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& data) {
  auto [v, shape] = matrix_from(data);
  PcaResult res = first_principal_component(v, shape.first, shape.second);
  return py::make_tuple(vector_to(res.component), res.eigenvalue);
}

py::array_t<double> toy_logits(const std::string& config_json, std::uint64_t seed) {
  RunConfig rc = parse_run_config(config_json);
  rc.seed = seed;
  ToyModel model = ToyModel::build(rc.model, seed);
  SyntheticDataset data = rc.build_dataset();
  std::vector<ModelInput> batch;
  for (int i = 0; i < 2; ++i)
    batch.push_back(to_model_input(data.samples[i], data.pseudo_image_tokens,
                                   data.image_feature_dim));
  ForwardOutput out = model.forward(batch);
  return matrix_to({out.logits.values().begin(), out.logits.values().end()},
                   out.logits.rows(), out.logits.cols());
}

}  // namespace

PYBIND11_MODULE(_moekit, m) {
  m.doc() = "sparse expert layer mechanics: routing, balance loss, accounting";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<ShapeError>(m, "ShapeError");

  m.def("count_parameters", &params_from_json, py::arg("config_json"),
        "activated/total parameter counts for a run-config json string");
  m.def("route_top_k", &route_top_k, py::arg("probs"), py::arg("k"),
        py::arg("renormalize") = false,
        "top-k expert indices and gate weights per probability row");
  m.def("capacity_kept", &capacity_kept, py::arg("probs"), py::arg("k"),
        py::arg("capacity_factor"),
        "kept flags after batch-priority capacity dropping, plus the drop rate");
  m.def("balance_loss", &balance_loss, py::arg("probs"),
        "load balancing loss E * sum_i F_i G_i with argmax counting");
  m.def("softmax", &softmax_py, py::arg("x"), py::arg("axis") = 1);
  m.def("gelu", &gelu_py, py::arg("x"));
  m.def("layer_norm", &layer_norm_py, py::arg("x"), py::arg("gain"), py::arg("bias"),
        py::arg("eps") = 1e-5);
  m.def("cosine_lr", &cosine_lr, py::arg("step"), py::arg("total_steps"), py::arg("base_lr"));
  m.def("pca_first_component", &pca_first_component, py::arg("data"));
  m.def("toy_logits", &toy_logits, py::arg("config_json"), py::arg("seed") = 0,
        "deterministic logits of a freshly built model on two canonical samples");
  m.attr("__version__") = "0.1.0";
}
