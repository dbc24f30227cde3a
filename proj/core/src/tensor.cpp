#include "riskkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "riskkit/errors.hpp"

namespace riskkit {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

// Builds an op result. The tape is recorded only when some input needs a
// gradient and taping is enabled on this thread.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename Forward, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Forward f, DA da, DB db) {
  require_same_shape(a, b, name);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  NodePtr an = a.node();
  NodePtr bn = b.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn, da, db](detail::Node& self) {
    const auto n = self.grad.size();
    if (an->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += da(an->value[i], bn->value[i], self.grad[i]);
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) bn->grad[i] += db(an->value[i], bn->value[i], self.grad[i]);
    }
  });
}

// y = f(x) elementwise; dfdx receives (x, y).
template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, Forward f, Derivative dfdx) {
  if (!a.defined()) throw ShapeError("unary op on undefined tensor");
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  NodePtr an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, dfdx](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      an->grad[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
    }
  });
}

void collect_topological(const NodePtr& root, std::vector<detail::Node*>& order) {
  std::unordered_set<detail::Node*> visited;
  // Iterative post-order DFS; deep MLP graphs are shallow but batches of
  // composed losses can chain many ops.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

detail::Node& Tensor::checked() const {
  if (!node_) throw Error("use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }
std::size_t Tensor::numel() const { return checked().value.size(); }
std::size_t Tensor::rows() const { return checked().shape.front(); }
std::size_t Tensor::cols() const { return numel() / rows(); }

std::span<const double> Tensor::values() const { return checked().value; }

std::span<double> Tensor::mutable_values() {
  auto& n = checked();
  if (!n.is_leaf()) throw Error("mutable_values() on a non-leaf tensor");
  return n.value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  auto& n = checked();
  if (!n.is_leaf()) throw Error("set_requires_grad() on a non-leaf tensor");
  n.requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return checked().is_leaf(); }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw Error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  auto& n = checked();
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tensor::backward() const {
  auto& root = checked();
  if (root.value.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_string(root.shape));
  }
  if (!root.requires_grad) throw Error("backward() on a tensor that is not part of a gradient tape");

  std::vector<detail::Node*> order;
  collect_topological(node_, order);
  for (auto* n : order) {
    if (!n->is_leaf()) {
      n->grad.assign(n->value.size(), 0.0);
    } else if (n->grad.size() != n->value.size()) {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

Tensor Tensor::copy() const {
  Tensor out(shape(), node_->value, node_->requires_grad && node_->is_leaf());
  return out;
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("reshape " + shape_string(shape()) + " -> " + shape_string(new_shape));
  }
  NodePtr an = node_;
  return make_result(std::move(new_shape), an->value, {an}, [an](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor operator+(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor operator*(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; }, [](double x, double, double g) { return g * x; });
}

Tensor operator/(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor operator-(const Tensor& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor operator*(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor operator*(double s, const Tensor& a) { return a * s; }

Tensor operator+(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor operator-(const Tensor& a, double s) { return a + (-s); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) throw ShapeError("matmul: undefined tensor");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  NodePtr an = a.node();
  NodePtr bn = b.node();
  return make_result({n, m}, std::move(out), {an, bn}, [an, bn, n, k, m](detail::Node& self) {
    const double* g = self.grad.data();
    if (an->requires_grad) {
      // dA = G * B^T
      const double* bvv = bn->value.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bvv + p * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          an->grad[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      // dB = A^T * G
      const double* avv = an->value.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = avv[i * k + p];
          if (aip == 0.0) continue;
          double* brow = bn->grad.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) brow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (!a.defined() || !bias.defined()) throw ShapeError("add_row: undefined tensor");
  if (a.shape().size() != 2 || bias.numel() != a.shape()[1]) {
    throw ShapeError("add_row: cannot broadcast " + shape_string(bias.shape()) + " over " +
                     shape_string(a.shape()));
  }
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  const auto av = a.values();
  const auto bv = bias.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i * m + j] + bv[j];
  }
  NodePtr an = a.node();
  NodePtr bn = bias.node();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn, n, m](detail::Node& self) {
    if (an->requires_grad) {
      for (std::size_t i = 0; i < n * m; ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) bn->grad[j] += self.grad[i * m + j];
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  // log(1 + e^x) evaluated without overflow.
  return unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  if (!a.defined()) throw ShapeError("sum: undefined tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  NodePtr an = a.node();
  return make_result({1}, {s}, {an}, [an](detail::Node& self) {
    const double g = self.grad[0];
    for (auto& v : an->grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (!a.defined()) throw ShapeError("mean: undefined tensor");
  return sum(a) * (1.0 / static_cast<double>(a.numel()));
}

Tensor row_sum(const Tensor& a) {
  if (!a.defined()) throw ShapeError("row_sum: undefined tensor");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i] += av[i * m + j];
  }
  NodePtr an = a.node();
  return make_result({n}, std::move(out), {an}, [an, n, m](detail::Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += self.grad[i];
    }
  });
}

Tensor row_mean(const Tensor& a) { return row_sum(a) * (1.0 / static_cast<double>(a.cols())); }

Tensor softmax_rows(const Tensor& a) {
  if (!a.defined()) throw ShapeError("softmax_rows: undefined tensor");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = av.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  NodePtr an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, n, m](detail::Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* s = self.value.data() + i * m;
      const double* g = self.grad.data() + i * m;
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g[j] * s[j];
      for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += s[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  if (!a.defined()) throw ShapeError("log_softmax_rows: undefined tensor");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = av.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = row[j] - lse;
  }
  NodePtr an = a.node();
  return make_result(a.shape(), std::move(out), {an}, [an, n, m](detail::Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* ls = self.value.data() + i * m;
      const double* g = self.grad.data() + i * m;
      double gsum = 0.0;
      for (std::size_t j = 0; j < m; ++j) gsum += g[j];
      for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += g[j] - std::exp(ls[j]) * gsum;
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (!a.defined()) throw ShapeError("gather_rows: undefined tensor");
  if (rows.empty()) throw ShapeError("gather_rows: empty row selection");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.values();
  std::vector<double> out(rows.size() * m);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(av.data() + rows[r] * m, m, out.data() + r * m);
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  NodePtr an = a.node();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result(std::move(shape), std::move(out), {an}, [an, idx, m](detail::Node& self) {
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < m; ++j) an->grad[idx[r] * m + j] += self.grad[r * m + j];
    }
  });
}

}  // namespace riskkit
