#include "ivpt/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

namespace ivpt {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Array& Node::grad_ref() {
  if (grad.empty()) grad = Array::zeros(value.shape());
  return grad;
}

real Node::scalar() const {
  if (value.numel() != 1) throw std::logic_error("Node::scalar on non-scalar node");
  return value[0];
}

Var constant(Array v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->op_name = "constant";
  return n;
}

Var parameter(Array v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->op_name = "parameter";
  return n;
}

Var make_op(Array value, std::vector<Var> parents, std::function<void(Node&)> backward_fn,
            const char* op_name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op_name = op_name;
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p && p->requires_grad) {
        needs = true;
        break;
      }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void backward(const Var& root) {
  if (!root) throw std::invalid_argument("backward on null Var");
  if (root->numel() != 1) throw std::invalid_argument("backward requires a scalar root");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; graphs are deep enough that recursion is unsafe.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child].get();
      ++next_child;
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_ref().fill(real(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

}  // namespace ivpt
