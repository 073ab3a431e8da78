#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ivpt/array.hpp"

namespace ivpt {

// Reverse-mode autodiff on a dynamically built tape. Every op produces a Node
// holding its value, its parents and a closure that pushes the node's gradient
// into the parents. Nodes whose inputs carry no gradient requirement are
// created detached (no parents, no closure), so inference forwards build no
// graph at all.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Array value;
  Array grad;  // lazily allocated, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;
  const char* op_name = "";

  Array& grad_ref();
  bool has_grad() const { return !grad.empty(); }
  const Shape& shape() const { return value.shape(); }
  int64_t numel() const { return value.numel(); }
  real scalar() const;
};

bool grad_enabled();

// RAII switch that disables graph construction (evaluation / metrics paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

Var constant(Array v);
Var parameter(Array v);
Var make_op(Array value, std::vector<Var> parents, std::function<void(Node&)> backward_fn,
            const char* op_name);

// Backpropagates from a scalar root: seeds d(root)/d(root) = 1 and runs the
// tape in reverse topological order.
void backward(const Var& root);

}  // namespace ivpt
