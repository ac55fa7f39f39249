#include "msht/autograd.hpp"

#include <unordered_set>

namespace msht {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor& Node::grad_buffer() {
  if (grad.empty() && value.numel() > 0) grad = Tensor::zeros(value.shape());
  if (grad.shape() != value.shape()) grad = Tensor::zeros(value.shape());
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::grad() const {
  if (!has_grad()) throw std::logic_error("variable has no gradient");
  return node_->grad;
}

Var Var::make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

void Var::backward() {
  if (node_->value.numel() != 1) {
    throw std::logic_error("backward() without seed requires a scalar, got shape " +
                           shape_to_string(node_->value.shape()));
  }
  backward(Tensor::full(node_->value.shape(), 1.0));
}

void Var::backward(const Tensor& seed) {
  if (!node_->requires_grad) {
    throw std::logic_error("backward() on a value that was not recorded with gradients");
  }
  if (seed.shape() != node_->value.shape()) throw ShapeError("backward seed shape mismatch");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  Tensor& g = node_->grad_buffer();
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->inputs.clear();
    }
  }
}

}  // namespace msht
