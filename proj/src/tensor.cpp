// SPDX-License-Identifier: Apache-2.0

#include "moekit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace moekit {

namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubicCoeff = 0.044715;

thread_local bool g_finite_checks = true;
thread_local std::uint64_t g_mac_count = 0;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

void check_finite(const std::string& op, const std::vector<double>& v) {
  if (!g_finite_checks) return;
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError("non-finite value produced by op '" + op + "'");
    }
  }
}

void require_2d(const Tensor& t, const char* who) {
  if (t.shape().size() != 2) throw ShapeError(std::string(who) + ": expected a 2-D tensor");
}

}  // namespace

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }
std::uint64_t mac_count() { return g_mac_count; }
void reset_mac_count() { g_mac_count = 0; }

detail::Node& Tensor::node() const {
  if (!n_) throw ShapeError("use of an undefined tensor");
  return *n_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value buffer length does not match shape");
  }
  Tensor t;
  t.n_ = std::make_shared<detail::Node>();
  t.n_->shape = std::move(shape);
  t.n_->values = std::move(values);
  t.n_->requires_grad = requires_grad;
  check_finite("leaf", t.n_->values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return node().shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return node().shape[1];
}

std::span<const double> Tensor::grad() const {
  node().ensure_grad();
  return node().grad;
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_2d(*this, "at");
  return node().values[r * node().shape[1] + c];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
  return node().values[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node().is_leaf) throw ShapeError("requires_grad can only be toggled on leaves");
  node().requires_grad = on;
}

void Tensor::zero_grad() {
  node().grad.assign(node().values.size(), 0.0);
}

Tensor Tensor::detach() const {
  return from_values(node().shape, node().values, false);
}

Tensor make_op(std::string op, Shape shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward) {
  check_finite(op, values);
  Tensor t;
  t.n_ = std::make_shared<detail::Node>();
  t.n_->shape = std::move(shape);
  t.n_->values = std::move(values);
  t.n_->is_leaf = false;
  t.n_->op = std::move(op);
  bool rg = false;
  t.n_->parents.reserve(parents.size());
  for (const Tensor& p : parents) {
    rg = rg || p.requires_grad();
    t.n_->parents.push_back(p.node_ptr());
  }
  t.n_->requires_grad = rg;
  if (rg) t.n_->backward = std::move(backward);
  return t;
}

Tape Tape::trace(const Tensor& root) {
  Tape tape;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, bool>> stack;
  stack.emplace_back(root.node_ptr().get(), false);
  while (!stack.empty()) {
    auto [n, emitted] = stack.back();
    stack.pop_back();
    if (emitted) {
      tape.order.push_back(n);
      continue;
    }
    if (seen.count(n)) continue;
    seen.insert(n);
    stack.emplace_back(n, true);
    for (auto it = n->parents.rbegin(); it != n->parents.rend(); ++it) {
      if (!seen.count(it->get())) stack.emplace_back(it->get(), false);
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward expects a scalar loss");
  Tape tape = Tape::trace(loss);
  auto* root = loss.node_ptr().get();
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->requires_grad && n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

void Tensor::backward() const { moekit::backward(*this); }

// --- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  g_mac_count += static_cast<std::uint64_t>(m) * n * k;
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [pa, pb, m, n, k](detail::Node& self) {
                   const auto& g = self.grad;
                   if (pa->requires_grad) {
                     pa->ensure_grad();
                     // dA = G * B^T
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) {
                         const double gij = g[i * n + j];
                         for (std::size_t p = 0; p < k; ++p)
                           pa->grad[i * k + p] += gij * pb->values[p * n + j];
                       }
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     // dB = A^T * G
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const double aip = pa->values[i * k + p];
                         for (std::size_t j = 0; j < n; ++j)
                           pb->grad[p * n + j] += aip * g[i * n + j];
                       }
                   }
                 });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto pa = a.node_ptr();
  return make_op("transpose", {n, m}, std::move(out), {a},
                 [pa, m, n](detail::Node& self) {
                   if (!pa->requires_grad) return;
                   pa->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       pa->grad[i * n + j] += self.grad[j * m + i];
                 });
}

namespace {

Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          double (*fwd)(double, double),
                          void (*bwd)(double g, double av, double bv, double& da, double& db)) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(name) + ": shape mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i], b.values()[i]);
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return make_op(name, a.shape(), std::move(out), {a, b},
                 [pa, pb, bwd](detail::Node& self) {
                   const bool ga = pa->requires_grad, gb = pb->requires_grad;
                   if (ga) pa->ensure_grad();
                   if (gb) pb->ensure_grad();
                   double dummy = 0.0;
                   for (std::size_t i = 0; i < self.values.size(); ++i) {
                     bwd(self.grad[i], pa->values[i], pb->values[i],
                         ga ? pa->grad[i] : dummy, gb ? pb->grad[i] : dummy);
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double& da, double& db) {
        da += g;
        db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double& da, double& db) {
        da += g;
        db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double av, double bv, double& da, double& db) {
        da += g * bv;
        db += g * av;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double av, double bv, double& da, double& db) {
        da += g / bv;
        db -= g * av / (bv * bv);
      });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
  auto pa = a.node_ptr();
  return make_op("scale", a.shape(), std::move(out), {a},
                 [pa, c](detail::Node& self) {
                   if (!pa->requires_grad) return;
                   pa->ensure_grad();
                   for (std::size_t i = 0; i < self.values.size(); ++i)
                     pa->grad[i] += self.grad[i] * c;
                 });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_rowwise");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.size() != n) throw ShapeError("add_rowwise: bias length must equal cols");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = x.values()[i * n + j] + bias.values()[j];
  auto px = x.node_ptr();
  auto pb = bias.node_ptr();
  return make_op("add_rowwise", {m, n}, std::move(out), {x, bias},
                 [px, pb, m, n](detail::Node& self) {
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (std::size_t i = 0; i < m * n; ++i) px->grad[i] += self.grad[i];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
                   }
                 });
}

namespace {

// Shared row-softmax kernel; `limit(i)` gives the number of visible columns
// in row i (n for the full case, i+1 for the causal case).
template <typename Limit>
std::vector<double> softmax_rows_values(const Tensor& x, Limit limit) {
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t w = limit(i);
    double mx = x.values()[i * n];
    for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, x.values()[i * n + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      const double e = std::exp(x.values()[i * n + j] - mx);
      out[i * n + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < w; ++j) out[i * n + j] /= denom;
  }
  return out;
}

std::function<void(detail::Node&)> softmax_rows_backward(std::shared_ptr<detail::Node> px,
                                                         std::size_t m, std::size_t n) {
  return [px, m, n](detail::Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        dot += self.grad[i * n + j] * self.values[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const double y = self.values[i * n + j];
        px->grad[i * n + j] += y * (self.grad[i * n + j] - dot);
      }
    }
  };
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (x.shape().size() == 1) {
    Tensor as_row = make_op("reshape_row", {1, x.size()},
                            {x.values().begin(), x.values().end()}, {x},
                            [px = x.node_ptr()](detail::Node& self) {
                              if (!px->requires_grad) return;
                              px->ensure_grad();
                              for (std::size_t i = 0; i < self.values.size(); ++i)
                                px->grad[i] += self.grad[i];
                            });
    Tensor sm = softmax(as_row, 1);
    return make_op("reshape_flat", x.shape(), {sm.values().begin(), sm.values().end()}, {sm},
                   [ps = sm.node_ptr()](detail::Node& self) {
                     if (!ps->requires_grad) return;
                     ps->ensure_grad();
                     for (std::size_t i = 0; i < self.values.size(); ++i)
                       ps->grad[i] += self.grad[i];
                   });
  }
  require_2d(x, "softmax");
  if (axis == 0) return transpose(softmax(transpose(x), 1));
  if (axis != 1) throw ShapeError("softmax: axis out of range");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  auto out = softmax_rows_values(x, [n](std::size_t) { return n; });
  return make_op("softmax", {m, n}, std::move(out), {x},
                 softmax_rows_backward(x.node_ptr(), m, n));
}

Tensor softmax_causal_rows(const Tensor& scores) {
  require_2d(scores, "softmax_causal_rows");
  const std::size_t m = scores.shape()[0], n = scores.shape()[1];
  if (m != n) throw ShapeError("softmax_causal_rows: expects a square matrix");
  auto out = softmax_rows_values(scores, [](std::size_t i) { return i + 1; });
  // Masked entries are exactly zero, so the dense backward formula is valid.
  return make_op("softmax_causal", {m, n}, std::move(out), {scores},
                 softmax_rows_backward(scores.node_ptr(), m, n));
}

Tensor log_softmax_rows(const Tensor& x) {
  require_2d(x, "log_softmax_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x.values()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.values()[i * n + j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(x.values()[i * n + j] - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.values()[i * n + j] - lse;
  }
  auto px = x.node_ptr();
  return make_op("log_softmax", {m, n}, std::move(out), {x},
                 [px, m, n](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     double gsum = 0.0;
                     for (std::size_t j = 0; j < n; ++j) gsum += self.grad[i * n + j];
                     for (std::size_t j = 0; j < n; ++j) {
                       const double sm = std::exp(self.values[i * n + j]);
                       px->grad[i * n + j] += self.grad[i * n + j] - sm * gsum;
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (n <= 1) throw ShapeError("layer_norm: feature dimension must exceed 1");
  if (gain.size() != n || bias.size() != n)
    throw ShapeError("layer_norm: gain/bias length must equal cols");
  std::vector<double> out(m * n);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x.values()[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.values()[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (x.values()[i * n + j] - mu) * is;
      (*xhat)[i * n + j] = xh;
      out[i * n + j] = gain.values()[j] * xh + bias.values()[j];
    }
  }
  auto px = x.node_ptr();
  auto pg = gain.node_ptr();
  auto pb = bias.node_ptr();
  return make_op("layer_norm", {m, n}, std::move(out), {x, gain, bias},
                 [px, pg, pb, xhat, inv_std, m, n](detail::Node& self) {
                   const double dn = static_cast<double>(n);
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i) {
                       double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         const double dxh = self.grad[i * n + j] * pg->values[j];
                         sum_dxh += dxh;
                         sum_dxh_xh += dxh * (*xhat)[i * n + j];
                       }
                       const double is = (*inv_std)[i];
                       for (std::size_t j = 0; j < n; ++j) {
                         const double dxh = self.grad[i * n + j] * pg->values[j];
                         px->grad[i * n + j] +=
                             is * (dxh - sum_dxh / dn - (*xhat)[i * n + j] * sum_dxh_xh / dn);
                       }
                     }
                   }
                   if (pg->requires_grad) {
                     pg->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         pg->grad[j] += self.grad[i * n + j] * (*xhat)[i * n + j];
                   }
                   if (pb->requires_grad) {
                     pb->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
                   }
                 });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    const double u = kSqrt2OverPi * (v + kGeluCubicCoeff * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  auto px = x.node_ptr();
  return make_op("gelu", x.shape(), std::move(out), {x},
                 [px](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < self.values.size(); ++i) {
                     const double v = px->values[i];
                     const double u = kSqrt2OverPi * (v + kGeluCubicCoeff * v * v * v);
                     const double t = std::tanh(u);
                     const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubicCoeff * v * v);
                     px->grad[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                   }
                 });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto px = x.node_ptr();
  return make_op("sum", {1}, {s}, {x},
                 [px](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (double& g : px->grad) g += self.grad[0];
                 });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  auto px = x.node_ptr();
  return make_op("mean", {1}, {s * inv}, {x},
                 [px, inv](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (double& g : px->grad) g += self.grad[0] * inv;
                 });
}

Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
  require_2d(x, "gather_rows");
  const std::size_t n = x.shape()[1];
  for (std::size_t r : rows)
    if (r >= x.shape()[0]) throw ShapeError("gather_rows: row index out of range");
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(&x.values()[rows[i] * n], n, &out[i * n]);
  auto px = x.node_ptr();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return make_op("gather_rows", {idx->size(), n}, std::move(out), {x},
                 [px, idx, n](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < idx->size(); ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       px->grad[(*idx)[i] * n + j] += self.grad[i * n + j];
                 });
}

Tensor scatter_add_rows(const Tensor& into, std::vector<std::size_t> rows, const Tensor& src) {
  require_2d(into, "scatter_add_rows");
  require_2d(src, "scatter_add_rows");
  const std::size_t n = into.shape()[1];
  if (src.shape()[1] != n) throw ShapeError("scatter_add_rows: column count mismatch");
  if (src.shape()[0] != rows.size()) throw ShapeError("scatter_add_rows: row index count mismatch");
  std::vector<double> out(into.values().begin(), into.values().end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= into.shape()[0]) throw ShapeError("scatter_add_rows: row index out of range");
    for (std::size_t j = 0; j < n; ++j) out[rows[i] * n + j] += src.values()[i * n + j];
  }
  auto pi = into.node_ptr();
  auto ps = src.node_ptr();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return make_op("scatter_add_rows", into.shape(), std::move(out), {into, src},
                 [pi, ps, idx, n](detail::Node& self) {
                   if (pi->requires_grad) {
                     pi->ensure_grad();
                     for (std::size_t i = 0; i < self.values.size(); ++i)
                       pi->grad[i] += self.grad[i];
                   }
                   if (ps->requires_grad) {
                     ps->ensure_grad();
                     for (std::size_t i = 0; i < idx->size(); ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         ps->grad[i * n + j] += self.grad[(*idx)[i] * n + j];
                   }
                 });
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  require_2d(x, "slice_cols");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (c0 >= c1 || c1 > n) throw ShapeError("slice_cols: bad column range");
  const std::size_t w = c1 - c0;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(&x.values()[i * n + c0], w, &out[i * w]);
  auto px = x.node_ptr();
  return make_op("slice_cols", {m, w}, std::move(out), {x},
                 [px, m, n, c0, w](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < w; ++j)
                       px->grad[i * n + c0 + j] += self.grad[i * w + j];
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts.front().shape()[0];
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.shape()[0] != m) throw ShapeError("concat_cols: row count mismatch");
    n += p.shape()[1];
  }
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&p.values()[i * w], w, &out[i * n + off]);
    off += w;
  }
  std::vector<std::shared_ptr<detail::Node>> pnodes;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    pnodes.push_back(p.node_ptr());
    widths.push_back(p.shape()[1]);
  }
  return make_op("concat_cols", {m, n}, std::move(out), parts,
                 [pnodes, widths, m, n](detail::Node& self) {
                   std::size_t off = 0;
                   for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                     const std::size_t w = widths[pi];
                     if (pnodes[pi]->requires_grad) {
                       pnodes[pi]->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < w; ++j)
                           pnodes[pi]->grad[i * w + j] += self.grad[i * n + off + j];
                     }
                     off += w;
                   }
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts.front().shape()[1];
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.shape()[1] != n) throw ShapeError("concat_rows: column count mismatch");
    m += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<detail::Node>> pnodes;
  std::vector<std::size_t> heights;
  for (const Tensor& p : parts) {
    pnodes.push_back(p.node_ptr());
    heights.push_back(p.shape()[0]);
  }
  return make_op("concat_rows", {m, n}, std::move(out), parts,
                 [pnodes, heights, n](detail::Node& self) {
                   std::size_t off = 0;
                   for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                     const std::size_t h = heights[pi];
                     if (pnodes[pi]->requires_grad) {
                       pnodes[pi]->ensure_grad();
                       for (std::size_t i = 0; i < h * n; ++i)
                         pnodes[pi]->grad[i] += self.grad[off * n + i];
                     }
                     off += h;
                   }
                 });
}

Tensor gather_elements(const Tensor& x, std::vector<std::size_t> row,
                       std::vector<std::size_t> col) {
  require_2d(x, "gather_elements");
  if (row.size() != col.size()) throw ShapeError("gather_elements: index length mismatch");
  const std::size_t n = x.shape()[1];
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (row[i] >= x.shape()[0] || col[i] >= n)
      throw ShapeError("gather_elements: index out of range");
    out[i] = x.values()[row[i] * n + col[i]];
  }
  auto px = x.node_ptr();
  auto ri = std::make_shared<std::vector<std::size_t>>(std::move(row));
  auto ci = std::make_shared<std::vector<std::size_t>>(std::move(col));
  return make_op("gather_elements", {ri->size(), 1}, std::move(out), {x},
                 [px, ri, ci, n](detail::Node& self) {
                   if (!px->requires_grad) return;
                   px->ensure_grad();
                   for (std::size_t i = 0; i < ri->size(); ++i)
                     px->grad[(*ri)[i] * n + (*ci)[i]] += self.grad[i];
                 });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_2d(x, "scale_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (s.size() != m) throw ShapeError("scale_rows: scale length must equal rows");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = x.values()[i * n + j] * s.values()[i];
  auto px = x.node_ptr();
  auto ps = s.node_ptr();
  return make_op("scale_rows", {m, n}, std::move(out), {x, s},
                 [px, ps, m, n](detail::Node& self) {
                   if (px->requires_grad) {
                     px->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         px->grad[i * n + j] += self.grad[i * n + j] * ps->values[i];
                   }
                   if (ps->requires_grad) {
                     ps->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i) {
                       double acc = 0.0;
                       for (std::size_t j = 0; j < n; ++j)
                         acc += self.grad[i * n + j] * px->values[i * n + j];
                       ps->grad[i] += acc;
                     }
                   }
                 });
}

}  // namespace moekit
