#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "msht/tensor.hpp"

namespace msht {

struct Node {
  Tensor value;
  Tensor grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
};

/// Handle to a node of the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(int axis) const { return node_->value.dim(axis); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  /// Reverse-mode sweep from this scalar. Intermediate closures are released
  /// afterwards; gradients stay on every node that received one.
  void backward();
  /// Same, seeded with an explicit upstream gradient of this node's shape.
  void backward(const Tensor& seed);

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Var& other) const { return node_ == other.node_; }

  /// Records an op result. When gradient mode is off or no input needs a
  /// gradient the result is a constant leaf.
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace msht
