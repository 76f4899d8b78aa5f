#include "modellab/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "modellab/errors.hpp"

namespace mlab {

namespace {

thread_local bool t_grad_enabled = true;
thread_local OpCounters t_counters;

void check_shape(const Shape& shape) {
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

void check_finite(std::string_view op, const std::vector<float>& values) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " +
                         std::string(op.empty() ? "leaf construction" : op));
    }
  }
}

detail::Node& deref(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw ContractError("use of an undefined tensor");
  return *node;
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  check_shape(shape);
  if (mlab::numel(shape) != static_cast<Index>(values.size())) {
    throw ShapeError("shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  check_finite({}, values);
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  check_shape(shape);
  const auto n = static_cast<std::size_t>(mlab::numel(shape));
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return deref(node_).shape; }

int Tensor::rank() const { return static_cast<int>(shape().size()); }

Index Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

Index Tensor::numel() const { return static_cast<Index>(deref(node_).value.size()); }

std::span<const float> Tensor::values() const { return deref(node_).value; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return deref(node_).requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::is_leaf() const { return !deref(node_).backward; }

bool Tensor::has_grad() const { return !deref(node_).grad.empty(); }

std::span<const float> Tensor::grad() const { return deref(node_).grad; }

void Tensor::zero_grad() {
  auto& n = deref(node_);
  if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0f);
}

void Tensor::clear_grad() {
  deref(node_).grad.clear();
  node_->grad.shrink_to_fit();
}

std::span<float> Tensor::mutable_values() {
  if (!is_leaf()) throw ContractError("in-place write to an op result");
  return node_->value;
}

Tensor Tensor::detach() const { return Tensor(shape(), deref(node_).value, false); }

Tensor make_result(std::string_view op, Shape shape, std::vector<float> values,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  check_shape(shape);
  if (numel(shape) != static_cast<Index>(values.size())) {
    throw ShapeError(std::string(op) + ": result shape " + to_string(shape) +
                     " does not match value count");
  }
  check_finite(op, values);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node());
    }
  }
  return Tensor(std::move(node));
}

std::span<float> grad_sink(const Tensor& t) {
  auto& n = deref(t.node());
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0f);
  return n.grad;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tape Tape::record(const Tensor& loss) {
  Tape tape;
  tape.root_ = loss.node();
  if (!tape.root_) throw ContractError("backward on an undefined tensor");
  // Iterative post-order DFS over nodes that require grad.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  if (tape.root_->requires_grad) stack.emplace_back(tape.root_, 0);
  visited.insert(tape.root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (child->requires_grad && child->backward && visited.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    if (node->backward) tape.order_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

std::vector<std::string_view> Tape::op_names() const {
  std::vector<std::string_view> names;
  names.reserve(order_.size());
  for (const auto& n : order_) names.push_back(n->op);
  return names;
}

std::size_t Tape::run_backward() {
  if (root_->value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(root_->shape));
  }
  if (!root_->requires_grad) throw ContractError("loss does not depend on any trainable tensor");
  if (root_->grad.empty()) root_->grad.assign(1, 0.0f);
  root_->grad[0] += 1.0f;
  std::size_t executed = 0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto& node = **it;
    if (!node.grad.empty()) {
      node.backward(node.value, node.grad);
      ++executed;
    }
    // Interior gradients are not retained.
    node.grad.clear();
    node.grad.shrink_to_fit();
  }
  return executed;
}

void backward(const Tensor& loss) { Tape::record(loss).run_backward(); }

OpCounters& op_counters() { return t_counters; }

}  // namespace mlab
