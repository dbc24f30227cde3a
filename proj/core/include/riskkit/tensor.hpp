#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace riskkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One vertex of the gradient tape. Leaves own parameters or inputs; interior
// nodes own an activation plus the closure that pushes their gradient into
// their parents.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

/// Dense row-major array of doubles with optional participation in the
/// reverse-mode tape.
///
/// A Tensor is a handle: copies share the same storage, which is how model
/// fragments alias parameters. Use copy() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;
  // Product of all trailing dimensions; 1 for a 1-D tensor.
  std::size_t cols() const;

  std::span<const double> values() const;
  // Direct write access. Only legal on leaves; used by optimizers and loaders.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat) const { return values()[flat]; }
  double at(std::size_t row, std::size_t col) const { return values()[row * cols() + col]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
  /// interior gradients are reset at the start of every sweep.
  void backward() const;

  // Same values, no tape, new storage.
  Tensor detach() const;
  // Deep copy of a leaf, preserving requires_grad.
  Tensor copy() const;
  bool shares_storage_with(const Tensor& other) const { return node_ && node_ == other.node_; }

  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& checked() const;

  std::shared_ptr<detail::Node> node_;
};

// Disables taping on the current thread for its lifetime.
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

// Elementwise, identical shapes.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);

Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator+(const Tensor& a, double s);
Tensor operator-(const Tensor& a, double s);

// [n,k] x [k,m] -> [n,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// a[n,m] + bias[m], broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& bias);

Tensor relu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// [n, ...] -> [n], summing everything but the leading dimension.
Tensor row_sum(const Tensor& a);
Tensor row_mean(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

// Rows of `a` selected by index, in order. Gradient scatters back.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

bool all_finite(std::span<const double> values);

}  // namespace riskkit
