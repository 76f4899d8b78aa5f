#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mlab {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct Node;
}

/// Dense row-major float32 array that participates in reverse-mode autodiff.
///
/// A Tensor is a handle: copies alias the same storage and graph node, the
/// way parameters are shared between a model and the graphs built from it.
/// Values produced by an op are never modified afterwards. Only leaves may be
/// written in place (optimizer updates), and only while no graph that reads
/// them is alive.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const;
  int rank() const;
  /// Extent along `axis`; negative axes count from the back.
  Index dim(int axis) const;
  Index numel() const;

  std::span<const float> values() const;
  float item() const;

  bool requires_grad() const;
  /// Only leaves can toggle this; op results inherit it from their inputs.
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();
  void clear_grad();

  std::span<float> mutable_values();
  /// Fresh leaf holding a copy of the values.
  Tensor detach() const;

  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Backward rule of one recorded op: receives the op's output values and the
/// gradient flowing into that output.
using BackwardFn =
    std::function<void(std::span<const float> out, std::span<const float> grad_out)>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty means "no gradient"
  bool requires_grad = false;
  std::string_view op;  // empty for leaves
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Creates the output of an op. Records `inputs` and `backward` only when grad
/// mode is on and at least one input requires grad. Rejects non-finite values.
Tensor make_result(std::string_view op, Shape shape, std::vector<float> values,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Gradient buffer of `t` for accumulation inside a backward rule, allocated
/// as zeros on first use. Empty span if `t` does not require grad.
std::span<float> grad_sink(const Tensor& t);

bool grad_enabled();

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Topologically ordered record of the ops reachable from a loss.
class Tape {
 public:
  static Tape record(const Tensor& loss);

  std::size_t size() const { return order_.size(); }
  /// Op names in forward (topological) order.
  std::vector<std::string_view> op_names() const;
  /// Seeds d(loss)=1 and runs every backward rule once, in reverse order.
  /// Returns the number of rules executed.
  std::size_t run_backward();

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<std::shared_ptr<detail::Node>> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf with requires_grad.
void backward(const Tensor& loss);

/// Per-thread instrumentation used by the cost-model cross-checks.
struct OpCounters {
  std::uint64_t macs = 0;            // forward multiply-adds in contractions
  std::uint64_t encoder_blocks = 0;  // vision encoder block evaluations
};

OpCounters& op_counters();

}  // namespace mlab
