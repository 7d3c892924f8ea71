// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a dynamic reverse-mode tape.
//
// Matrices are row-major. Sequence data is laid out feature-major: a hidden
// state block is d x N with one column per sequence position.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace invllava {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class DegenerateLossError : public Error {
 public:
  using Error::Error;
};

class OracleError : public Error {
 public:
  using Error::Error;
};

std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Row-major literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(
      std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t rows() const { return dim(0); }
  // Columns of a matrix; a rank-1 tensor is treated as a single column.
  std::size_t cols() const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // In-place access is only permitted on leaves (parameter updates, probes).
  std::span<double> mutable_values();
  double operator()(std::size_t r, std::size_t c) const;
  double operator[](std::size_t i) const { return values()[i]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  const char* op_name() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  // Fresh leaf holding a copy of the values.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Square boolean visibility pattern for attention; true = may attend.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n, bool fill = false)
      : n_(n), allowed_(n * n, fill ? 1 : 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t query, std::size_t key) const {
    return allowed_[query * n_ + key] != 0;
  }
  void set(std::size_t query, std::size_t key, bool on) {
    allowed_[query * n_ + key] = on ? 1 : 0;
  }
  static AttentionMask causal(std::size_t n);

 private:
  std::size_t n_ = 0;
  std::vector<char> allowed_;
};

// ---- taped primitives ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// s must hold exactly one element; both s and x receive gradients.
Tensor scale_by(const Tensor& s, const Tensor& x);
// x: d x N, bias: d. Bias added to every column.
Tensor add_column_bias(const Tensor& x, const Tensor& bias);
Tensor transpose(const Tensor& x);
// Rows of a stacked above rows of b. Column counts must agree.
Tensor concat_features(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_columns(const Tensor& x, std::span<const std::size_t> columns);
// Places column j of x at position columns[j] of a zero d x total matrix.
Tensor scatter_columns(const Tensor& x, std::span<const std::size_t> columns,
                       std::size_t total);
// Normalizes each column over its rows, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// tanh approximation
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
// table: |V| x d. Result: d x n, column j = table row ids[j].
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);
Tensor softmax_rows(const Tensor& x);
// Masked entries get zero probability. A row with nothing visible falls
// back to its diagonal entry.
Tensor masked_softmax_rows(const Tensor& x, const AttentionMask& mask);
Tensor sum(const Tensor& x);
// logits: |V| x n; one column per predicted position. Mean over positions
// with mask[j] set of -log softmax(column j)[targets[j]].
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     const std::vector<bool>& mask);

// ---- tape replay ----

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// loss. Intermediate gradients are reset on every call.
void backward(const Tensor& loss);

// Same traversal, but leaf gradients go to the returned map instead of the
// leaves. Safe to run concurrently on independent graphs over shared leaves.
using GradientMap = std::unordered_map<const detail::Node*, std::vector<double>>;
GradientMap backward_to_map(const Tensor& loss);

// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Multiply-accumulate count of matmul forwards on this thread.
std::uint64_t matmul_mac_count();
void reset_matmul_mac_count();

// ---- finite-difference oracle ----

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

// Compares tape gradients of loss_fn with central differences for every
// coordinate of params (or an evenly strided subset of at most
// max_coords_per_tensor coordinates per tensor when that is non-zero).
// Relative error is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  std::span<Tensor> params, double eps,
                                  std::size_t max_coords_per_tensor = 0);

}  // namespace invllava
