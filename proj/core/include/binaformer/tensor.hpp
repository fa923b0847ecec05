#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace binaformer {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

// One value in the computation graph. Leaves have no inputs and no backward
// function; op outputs keep their inputs alive until the graph is dropped.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

struct BackwardStats {
  std::size_t nodes_visited = 0;
  std::size_t ops_executed = 0;
};

/// Dense row-major array of doubles with optional reverse-mode gradient.
///
/// Tensor is a shared handle: copies alias the same storage and graph node.
/// Use clone() for an independent leaf copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access, for parameter updates between steps. Never use on a
  // tensor that is an input of a graph that will still be differentiated.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  const std::string& op() const;

  /// Backpropagates from a scalar tensor (seed 1).
  BackwardStats backward() const;
  /// Backpropagates with an explicit seed of the same size as this tensor.
  BackwardStats backward(std::span<const double> seed) const;

  /// Leaf copy sharing nothing with this tensor.
  Tensor clone(bool requires_grad = false) const;
  /// Leaf sharing no graph but copying the values.
  Tensor detach() const { return clone(false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Nodes reachable from a root in topological order (inputs before outputs).
/// Backward traverses this list exactly once, in reverse.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

  BackwardStats run_backward(std::span<const double> seed);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {

// Builds an op output. Inputs and the backward closure are only retained when
// at least one input requires a gradient and grad mode is on.
Tensor make_result(Shape shape, std::vector<double> value, std::string op,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace binaformer
