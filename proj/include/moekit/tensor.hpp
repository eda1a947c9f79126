// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with reverse-mode differentiation. Small by design:
// just the operations a tiny transformer with sparse expert layers needs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace moekit {

using Shape = std::vector<std::size_t>;

/// Thrown when a forward operation produces NaN/Inf (an error state) or a
/// numeric precondition fails.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown on shape/argument misuse.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op;  // empty for leaves
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(loss)/d(parent) into each parent's grad, reading this
  // node's grad. Only set when requires_grad.
  std::function<void(Node&)> backward;

  std::size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

/// Value-semantics handle to a node of the computation graph. Copies share
/// the underlying buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t size() const { return node().size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node().values; }
  std::span<double> values_mut() { return node().values; }
  std::span<const double> grad() const;
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return node().is_leaf; }
  void zero_grad();

  /// Reverse-mode pass from a scalar. Populates grad on every reachable
  /// tensor that requires grad.
  void backward() const;

  /// Leaf copy of the values, cut from the graph.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node_ptr() const { return n_; }

 private:
  friend Tensor make_op(std::string op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward);
  detail::Node& node() const;
  std::shared_ptr<detail::Node> n_;
};

/// Ordered record of graph nodes for backward traversal. Every node's
/// parents precede it.
struct Tape {
  std::vector<detail::Node*> order;
  static Tape trace(const Tensor& root);
};

void backward(const Tensor& loss);

// Toggle the NaN/Inf scan run after every forward operation (default on).
void set_finite_checks(bool on);
bool finite_checks_enabled();

// Multiply-accumulate counter, incremented by matmul. Thread-local.
std::uint64_t mac_count();
void reset_mac_count();

// --- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// [m x n] + [n], bias added to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

/// Softmax along `axis` of a 1-D or 2-D tensor, max-subtracted for stability.
Tensor softmax(const Tensor& x, std::size_t axis = 1);
/// Row softmax of a square score matrix where row i only sees columns <= i.
Tensor softmax_causal_rows(const Tensor& scores);
Tensor log_softmax_rows(const Tensor& x);

/// Per-row normalization to zero mean / unit variance, then affine.
/// gain and bias have length cols. Requires cols > 1.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

/// tanh-approximate GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows);
/// into + scatter of src rows at the given row indices (duplicates add).
Tensor scatter_add_rows(const Tensor& into, std::vector<std::size_t> rows,
                        const Tensor& src);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Picks x[row[i], col[i]] into a column vector [n x 1].
Tensor gather_elements(const Tensor& x, std::vector<std::size_t> row,
                       std::vector<std::size_t> col);
/// y[r, :] = x[r, :] * s[r], with s a [rows] or [rows x 1] tensor.
Tensor scale_rows(const Tensor& x, const Tensor& s);

}  // namespace moekit
