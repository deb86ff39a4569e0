#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stagesum {

using Shape = std::vector<std::size_t>;
/// Per-position boolean flags (1 = set), viewable as std::span<const std::uint8_t>.
using Mask = std::vector<std::uint8_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::uint64_t seq = 0;     // creation order; a valid topological order
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major array of doubles. Copies share storage; use clone() for
/// an independent buffer. Tensors produced by differentiable ops while grad
/// mode is on keep a reference to their inputs so backward() can replay them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void clear_grad();

  /// Seeds d(this)/d(this) = 1 and propagates to every reachable tensor that
  /// requires a gradient. Leaf gradients accumulate across calls.
  void backward() const;

  /// Same values, no history, no gradient requirement.
  Tensor detach() const;
  /// Independent copy of the values; keeps the requires_grad flag as a leaf.
  Tensor clone() const;
  /// Same values viewed with a new shape of equal size (differentiable).
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-topological record of the operations reachable from a root.
class Tape {
 public:
  static Tape trace(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  /// Runs every recorded backward function, newest first. The root's
  /// gradient must already be seeded.
  void replay() const;

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;
};

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

/// Wraps a freshly computed value as an op output. History is only recorded
/// when grad mode is on and some input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace stagesum
