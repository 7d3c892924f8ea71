// SPDX-License-Identifier: Apache-2.0

#include "invllava/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace invllava {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::size_t numel() const { return value.size(); }
};

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_macs = 0;
thread_local GradientMap* t_sink = nullptr;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

// Gradient buffer an op should accumulate into for the given input.
std::vector<double>& grad_ref(Node& n) {
  if (n.leaf && t_sink != nullptr) {
    auto& buf = (*t_sink)[&n];
    if (buf.empty()) buf.assign(n.numel(), 0.0);
    return buf;
  }
  if (n.grad.empty()) n.grad.assign(n.numel(), 0.0);
  return n.grad;
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n->requires_grad; }

Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::vector<std::shared_ptr<Node>> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->leaf = false;
  bool any = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) any = any || in->requires_grad;
  }
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace
}  // namespace detail

using detail::Node;

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::shared_ptr<Node> new_leaf(Shape shape, std::vector<double> values,
                               bool requires_grad) {
  if (detail::product(shape) != values.size()) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

void require_matrix(const Tensor& t, const char* what) {
  if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(what) + ": non-finite input");
    }
  }
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = detail::product(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0),
                         requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = detail::product(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value),
                         requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_leaf({1}, {value}, requires_grad));
}

Tensor Tensor::matrix(
    std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from({r, c}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  auto t = zeros({n, n});
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() == 1) return 1;
  return dim(1);
}

std::size_t Tensor::numel() const { return node_ ? node_->numel() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) throw ContractError("undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw ContractError("undefined tensor");
  if (!node_->leaf) {
    throw ContractError("in-place access to a non-leaf tensor (" +
                        std::string(node_->op) + ")");
  }
  return node_->value;
}

double Tensor::operator()(std::size_t r, std::size_t c) const {
  return values()[r * cols() + c];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("undefined tensor");
  if (!node_->leaf) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
}

void Tensor::clear_grad() {
  if (node_) {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach() const {
  return Tensor(new_leaf(shape(), node_->value, false));
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  }
  return m;
}

// ---- grad mode / instrumentation ----

NoGradGuard::NoGradGuard() : previous_(detail::t_grad_enabled) {
  detail::t_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { detail::t_grad_enabled = previous_; }

bool grad_enabled() { return detail::t_grad_enabled; }

std::uint64_t matmul_mac_count() { return detail::t_macs; }

void reset_matmul_mac_count() { detail::t_macs = 0; }

// ---- kernels ----

namespace {

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---- primitives ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " +
                         shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  detail::t_macs += static_cast<std::uint64_t>(m) * k * n;
  return detail::make_result(
      {m, n}, std::move(out), "matmul", {a.handle(), b.handle()},
      [m, k, n](Node& self) {
        auto& A = *self.inputs[0];
        auto& B = *self.inputs[1];
        if (detail::wants_grad(self.inputs[0])) {
          gemm_nt(self.grad.data(), B.value.data(),
                  detail::grad_ref(A).data(), m, n, k);
        }
        if (detail::wants_grad(self.inputs[1])) {
          gemm_tn(A.value.data(), self.grad.data(),
                  detail::grad_ref(B).data(), m, k, n);
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result(a.shape(), std::move(out), "add",
                             {a.handle(), b.handle()}, [](Node& self) {
                               for (int s = 0; s < 2; ++s) {
                                 if (!detail::wants_grad(self.inputs[s])) continue;
                                 auto& g = detail::grad_ref(*self.inputs[s]);
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i];
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result(a.shape(), std::move(out), "sub",
                             {a.handle(), b.handle()}, [](Node& self) {
                               for (int s = 0; s < 2; ++s) {
                                 if (!detail::wants_grad(self.inputs[s])) continue;
                                 auto& g = detail::grad_ref(*self.inputs[s]);
                                 const double sign = s == 0 ? 1.0 : -1.0;
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += sign * self.grad[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result(
      a.shape(), std::move(out), "mul", {a.handle(), b.handle()},
      [](Node& self) {
        for (int s = 0; s < 2; ++s) {
          if (!detail::wants_grad(self.inputs[s])) continue;
          auto& g = detail::grad_ref(*self.inputs[s]);
          const auto& other = self.inputs[1 - s]->value;
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * other[i];
        }
      });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= factor;
  return detail::make_result(x.shape(), std::move(out), "scale", {x.handle()},
                             [factor](Node& self) {
                               auto& g = detail::grad_ref(*self.inputs[0]);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += factor * self.grad[i];
                             });
}

Tensor scale_by(const Tensor& s, const Tensor& x) {
  if (s.numel() != 1) {
    throw DimensionError("scale_by: scale factor must be a scalar, got " +
                         shape_string(s.shape()));
  }
  const double factor = s.item();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= factor;
  return detail::make_result(
      x.shape(), std::move(out), "scale_by", {s.handle(), x.handle()},
      [](Node& self) {
        const double f = self.inputs[0]->value[0];
        const auto& xv = self.inputs[1]->value;
        if (detail::wants_grad(self.inputs[0])) {
          double acc = 0.0;
          for (std::size_t i = 0; i < xv.size(); ++i) acc += self.grad[i] * xv[i];
          detail::grad_ref(*self.inputs[0])[0] += acc;
        }
        if (detail::wants_grad(self.inputs[1])) {
          auto& g = detail::grad_ref(*self.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.grad[i];
        }
      });
}

Tensor add_column_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_column_bias");
  const std::size_t d = x.rows(), n = x.cols();
  if (bias.numel() != d) {
    throw DimensionError("add_column_bias: bias " + shape_string(bias.shape()) +
                         " does not match rows of " + shape_string(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[r];
  }
  return detail::make_result(
      x.shape(), std::move(out), "add_column_bias", {x.handle(), bias.handle()},
      [d, n](Node& self) {
        if (detail::wants_grad(self.inputs[0])) {
          auto& g = detail::grad_ref(*self.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::wants_grad(self.inputs[1])) {
          auto& g = detail::grad_ref(*self.inputs[1]);
          for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < n; ++c) acc += self.grad[r * n + c];
            g[r] += acc;
          }
        }
      });
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  }
  return detail::make_result({n, m}, std::move(out), "transpose", {x.handle()},
                             [m, n](Node& self) {
                               auto& g = detail::grad_ref(*self.inputs[0]);
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += self.grad[j * m + i];
                               }
                             });
}

namespace {

Tensor stack_rows(std::span<const Tensor> parts, const char* op) {
  if (parts.empty()) throw ContractError(std::string(op) + ": nothing to stack");
  const std::size_t n = parts[0].cols();
  std::size_t total_rows = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) {
    require_matrix(p, op);
    if (p.cols() != n) {
      throw DimensionError(std::string(op) + ": column counts disagree, " +
                           shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    total_rows += p.rows();
    inputs.push_back(p.handle());
  }
  std::vector<double> out;
  out.reserve(total_rows * n);
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return detail::make_result({total_rows, n}, std::move(out), op,
                             std::move(inputs), [](Node& self) {
                               std::size_t offset = 0;
                               for (auto& in : self.inputs) {
                                 const std::size_t len = in->numel();
                                 if (in->requires_grad) {
                                   auto& g = detail::grad_ref(*in);
                                   for (std::size_t i = 0; i < len; ++i)
                                     g[i] += self.grad[offset + i];
                                 }
                                 offset += len;
                               }
                             });
}

}  // namespace

Tensor concat_features(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return stack_rows(parts, "concat_features");
}

Tensor concat_rows(std::span<const Tensor> parts) {
  return stack_rows(parts, "concat_rows");
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t n = x.cols();
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") exceed " +
                         shape_string(x.shape()));
  }
  auto xv = x.values();
  std::vector<double> out(xv.begin() + begin * n,
                          xv.begin() + (begin + count) * n);
  return detail::make_result({count, n}, std::move(out), "slice_rows",
                             {x.handle()}, [begin, count, n](Node& self) {
                               auto& g = detail::grad_ref(*self.inputs[0]);
                               for (std::size_t i = 0; i < count * n; ++i)
                                 g[begin * n + i] += self.grad[i];
                             });
}

Tensor gather_columns(const Tensor& x, std::span<const std::size_t> columns) {
  require_matrix(x, "gather_columns");
  const std::size_t d = x.rows(), n = x.cols(), k = columns.size();
  for (auto c : columns) {
    if (c >= n) {
      throw IndexError("gather_columns: column " + std::to_string(c) +
                       " out of range for " + shape_string(x.shape()));
    }
  }
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  std::vector<double> out(d * k);
  auto xv = x.values();
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = xv[r * n + cols[j]];
  }
  return detail::make_result(
      {d, k}, std::move(out), "gather_columns", {x.handle()},
      [d, n, k, cols = std::move(cols)](Node& self) {
        auto& g = detail::grad_ref(*self.inputs[0]);
        for (std::size_t r = 0; r < d; ++r) {
          for (std::size_t j = 0; j < k; ++j)
            g[r * n + cols[j]] += self.grad[r * k + j];
        }
      });
}

Tensor scatter_columns(const Tensor& x, std::span<const std::size_t> columns,
                       std::size_t total) {
  require_matrix(x, "scatter_columns");
  const std::size_t d = x.rows(), k = x.cols();
  if (columns.size() != k) {
    throw DimensionError("scatter_columns: " + std::to_string(columns.size()) +
                         " target positions for " + shape_string(x.shape()));
  }
  std::vector<char> seen(total, 0);
  for (auto c : columns) {
    if (c >= total) {
      throw IndexError("scatter_columns: position " + std::to_string(c) +
                       " out of range " + std::to_string(total));
    }
    if (seen[c]) throw IndexError("scatter_columns: duplicate position");
    seen[c] = 1;
  }
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  std::vector<double> out(d * total, 0.0);
  auto xv = x.values();
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * total + cols[j]] = xv[r * k + j];
  }
  return detail::make_result(
      {d, total}, std::move(out), "scatter_columns", {x.handle()},
      [d, k, total, cols = std::move(cols)](Node& self) {
        auto& g = detail::grad_ref(*self.inputs[0]);
        for (std::size_t r = 0; r < d; ++r) {
          for (std::size_t j = 0; j < k; ++j)
            g[r * k + j] += self.grad[r * total + cols[j]];
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t d = x.rows(), n = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) +
                         "/" + shape_string(bias.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> normed(d * n), inv_std(n), out(d * n);
  for (std::size_t c = 0; c < n; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < d; ++r) mean += xv[r * n + c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      const double t = xv[r * n + c] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t r = 0; r < d; ++r) {
      normed[r * n + c] = (xv[r * n + c] - mean) * inv_std[c];
      out[r * n + c] = gv[r] * normed[r * n + c] + bv[r];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm",
      {x.handle(), gain.handle(), bias.handle()},
      [d, n, normed = std::move(normed), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = self.inputs[1]->value;
        const auto& dy = self.grad;
        if (detail::wants_grad(self.inputs[1])) {
          auto& gg = detail::grad_ref(*self.inputs[1]);
          for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < n; ++c) acc += dy[r * n + c] * normed[r * n + c];
            gg[r] += acc;
          }
        }
        if (detail::wants_grad(self.inputs[2])) {
          auto& gb = detail::grad_ref(*self.inputs[2]);
          for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < n; ++c) acc += dy[r * n + c];
            gb[r] += acc;
          }
        }
        if (detail::wants_grad(self.inputs[0])) {
          auto& gx = detail::grad_ref(*self.inputs[0]);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t c = 0; c < n; ++c) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t r = 0; r < d; ++r) {
              const double dxhat = dy[r * n + c] * gv[r];
              mean_dxhat += dxhat;
              mean_dxhat_xhat += dxhat * normed[r * n + c];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            for (std::size_t r = 0; r < d; ++r) {
              const double dxhat = dy[r * n + c] * gv[r];
              gx[r * n + c] += inv_std[c] * (dxhat - mean_dxhat -
                                             normed[r * n + c] * mean_dxhat_xhat);
            }
          }
        }
      });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return detail::make_result(x.shape(), std::move(out), "gelu", {x.handle()},
                             [](Node& self) {
                               const auto& xv = self.inputs[0]->value;
                               auto& g = detail::grad_ref(*self.inputs[0]);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double v = xv[i];
                                 const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
                                 const double dt = (1.0 - t * t) * kGeluC *
                                                   (1.0 + 3.0 * kGeluA * v * v);
                                 g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                               }
                             });
}

Tensor tanh(const Tensor& x) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return detail::make_result(x.shape(), std::move(out), "tanh", {x.handle()},
                             [](Node& self) {
                               auto& g = detail::grad_ref(*self.inputs[0]);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double y = self.value[i];
                                 g[i] += self.grad[i] * (1.0 - y * y);
                               }
                             });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols(), n = ids.size();
  std::vector<std::size_t> rows(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (ids[j] < 0 || static_cast<std::size_t>(ids[j]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[j]) +
                       " out of range for vocabulary of " +
                       std::to_string(vocab));
    }
    rows[j] = static_cast<std::size_t>(ids[j]);
  }
  auto tv = table.values();
  std::vector<double> out(d * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t r = 0; r < d; ++r) out[r * n + j] = tv[rows[j] * d + r];
  }
  return detail::make_result({d, n}, std::move(out), "embedding",
                             {table.handle()},
                             [d, n, rows = std::move(rows)](Node& self) {
                               auto& g = detail::grad_ref(*self.inputs[0]);
                               for (std::size_t j = 0; j < n; ++j) {
                                 for (std::size_t r = 0; r < d; ++r)
                                   g[rows[j] * d + r] += self.grad[r * n + j];
                               }
                             });
}

namespace {

void softmax_backward(Node& self, std::size_t m, std::size_t n) {
  auto& g = detail::grad_ref(*self.inputs[0]);
  const auto& y = self.value;
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
    for (std::size_t j = 0; j < n; ++j)
      g[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  require_finite(x.values(), "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto xv = x.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return detail::make_result(x.shape(), std::move(out), "softmax_rows",
                             {x.handle()},
                             [m, n](Node& self) { softmax_backward(self, m, n); });
}

Tensor masked_softmax_rows(const Tensor& x, const AttentionMask& mask) {
  require_matrix(x, "masked_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (mask.size() != m || m != n) {
    throw DimensionError("masked_softmax_rows: mask of size " +
                         std::to_string(mask.size()) + " for " +
                         shape_string(x.shape()));
  }
  auto xv = x.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    bool any = false;
    double mx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask(i, j)) continue;
      if (!std::isfinite(row[j])) throw NumericError("masked_softmax_rows: non-finite input");
      mx = any ? std::max(mx, row[j]) : row[j];
      any = true;
    }
    if (!any) {
      out[i * n + i] = 1.0;
      continue;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask(i, j)) continue;
      out[i * n + j] = std::exp(row[j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return detail::make_result(x.shape(), std::move(out), "masked_softmax_rows",
                             {x.handle()},
                             [m, n](Node& self) { softmax_backward(self, m, n); });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return detail::make_result({1}, {total}, "sum", {x.handle()}, [](Node& self) {
    auto& g = detail::grad_ref(*self.inputs[0]);
    for (double& v : g) v += self.grad[0];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                     const std::vector<bool>& mask) {
  require_matrix(logits, "cross_entropy");
  const std::size_t vocab = logits.rows(), n = logits.cols();
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets / " + std::to_string(mask.size()) +
                         " mask entries for logits " +
                         shape_string(logits.shape()));
  }
  std::size_t active = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask[j]) continue;
    ++active;
    if (targets[j] < 0 || static_cast<std::size_t>(targets[j]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[j]) +
                       " out of range for vocabulary of " + std::to_string(vocab));
    }
  }
  if (active == 0) {
    throw DegenerateLossError("cross_entropy: every position is masked out");
  }
  auto lv = logits.values();
  std::vector<double> probs(vocab * n, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask[j]) continue;
    double mx = lv[j];
    for (std::size_t v = 0; v < vocab; ++v) {
      const double z = lv[v * n + j];
      if (!std::isfinite(z)) throw NumericError("cross_entropy: non-finite logit");
      mx = std::max(mx, z);
    }
    double denom = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[v * n + j] = std::exp(lv[v * n + j] - mx);
      denom += probs[v * n + j];
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[v * n + j] /= denom;
    total += (std::log(denom) + mx) - lv[static_cast<std::size_t>(targets[j]) * n + j];
  }
  const double inv = 1.0 / static_cast<double>(active);
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<bool> msk = mask;
  return detail::make_result(
      {1}, {total * inv}, "cross_entropy", {logits.handle()},
      [vocab, n, inv, probs = std::move(probs), tgt = std::move(tgt),
       msk = std::move(msk)](Node& self) {
        auto& g = detail::grad_ref(*self.inputs[0]);
        const double scale = self.grad[0] * inv;
        for (std::size_t j = 0; j < n; ++j) {
          if (!msk[j]) continue;
          for (std::size_t v = 0; v < vocab; ++v) {
            double p = probs[v * n + j];
            if (static_cast<std::size_t>(tgt[j]) == v) p -= 1.0;
            g[v * n + j] += scale * p;
          }
        }
      });
}

// ---- tape replay ----

namespace {

// Post-order over the requires_grad subgraph; reversed, every node precedes
// its inputs.
std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !child->leaf && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

void run_backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(loss.shape()));
  }
  Node* root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("backward: loss is not connected to any leaf requiring grad");
  }
  if (root->leaf) {
    detail::grad_ref(*root)[0] += 1.0;
    return;
  }
  auto order = topological_order(root);
  for (Node* n : order) n->grad.assign(n->numel(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    n->backward_fn(*n);
    if (n != root) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  root->grad.clear();
}

}  // namespace

void backward(const Tensor& loss) { run_backward(loss); }

GradientMap backward_to_map(const Tensor& loss) {
  GradientMap sink;
  GradientMap* previous = detail::t_sink;
  detail::t_sink = &sink;
  try {
    run_backward(loss);
  } catch (...) {
    detail::t_sink = previous;
    throw;
  }
  detail::t_sink = previous;
  return sink;
}

// ---- finite differences ----

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  std::span<Tensor> params, double eps,
                                  std::size_t max_coords_per_tensor) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  for (const auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("finite_diff_check: parameters must be leaves requiring grad");
    }
  }
  for (auto& p : params) p.clear_grad();

  Tensor loss = loss_fn();
  if (loss.numel() != 1) throw ContractError("finite_diff_check: loss must be scalar");
  const double f0 = loss.item();
  {
    NoGradGuard guard;
    const double again = loss_fn().item();
    if (std::memcmp(&again, &f0, sizeof(double)) != 0) {
      throw OracleError("finite_diff_check: loss function is not deterministic");
    }
  }
  backward(loss);

  GradCheckResult result;
  NoGradGuard guard;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    std::vector<double> ad(p.numel(), 0.0);
    if (p.has_grad()) {
      auto g = p.grad();
      std::copy(g.begin(), g.end(), ad.begin());
    }
    const std::size_t total = p.numel();
    std::size_t stride = 1;
    if (max_coords_per_tensor > 0 && total > max_coords_per_tensor) {
      stride = (total + max_coords_per_tensor - 1) / max_coords_per_tensor;
    }
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < total; i += stride) {
      const double original = vals[i];
      vals[i] = original + eps;
      const double plus = loss_fn().item();
      vals[i] = original - eps;
      const double minus = loss_fn().item();
      vals[i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = std::abs(ad[i] - numeric) /
                         std::max(1e-8, std::abs(ad[i]) + std::abs(numeric));
      ++result.coordinates_checked;
      if (result.coordinates_checked == 1 || err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = t;
        result.worst_index = i;
        result.worst_autodiff = ad[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace invllava
