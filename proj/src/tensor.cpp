#include "stagesum/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "stagesum/errors.hpp"

namespace stagesum {

namespace {

std::atomic<std::uint64_t> next_seq{1};
thread_local bool grad_mode = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value) {
  if (shape_size(shape) != value.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = next_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, double fill) {
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  const auto n = shape_size(shape);
  node_ = new_node(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  node_ = new_node(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

const Shape& Tensor::shape() const {
  if (!node_) throw DimensionError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) throw DimensionError("use of an undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw DimensionError("use of an undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return values()[i]; }

double Tensor::at(std::size_t row, std::size_t col) const {
  return values()[row * dim(1) + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw DimensionError("use of an undefined tensor");
  if (!is_leaf()) throw ValidationError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TrainingError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw DimensionError("use of an undefined tensor");
  return node_->ensure_grad();
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const {
  if (size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_string(shape()));
  if (!requires_grad()) return;
  node_->ensure_grad()[0] += 1.0;
  Tape::trace(*this).replay();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value); }

Tensor Tensor::clone() const {
  Tensor copy(shape(), node_->value);
  copy.node_->requires_grad = node_->requires_grad;
  return copy;
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_size(new_shape) != size()) {
    throw DimensionError("cannot reshape " + shape_string(shape()) + " to " + shape_string(new_shape));
  }
  return detail::make_result(std::move(new_shape), node_->value, {this}, [](detail::Node& out) {
    auto& in = *out.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

Tape Tape::trace(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{root.node()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    for (const auto& input : node->inputs) {
      if (input->requires_grad && seen.insert(input.get()).second) stack.push_back(input);
    }
    if (node->backward) tape.order_.push_back(std::move(node));
  }
  std::sort(tape.order_.begin(), tape.order_.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });
  return tape;
}

void Tape::replay() const {
  for (const auto& node : order_) {
    if (!node->grad.empty()) node->backward(*node);
  }
}

bool grad_enabled() { return grad_mode; }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

Tensor detail::make_result(Shape shape, std::vector<double> value,
                           std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  Tensor out(new_node(std::move(shape), std::move(value)));
  if (!grad_mode) return out;
  bool any = false;
  for (const auto* input : inputs) any = any || input->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (const auto* input : inputs) node.inputs.push_back(input->node());
  node.backward = std::move(backward);
  return out;
}

}  // namespace stagesum
