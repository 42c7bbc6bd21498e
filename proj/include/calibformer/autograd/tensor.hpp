// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node holding a row-major value buffer, a
// lazily allocated gradient buffer and a backward closure. Graphs are built
// eagerly by the ops and released when the last handle to the root drops.
// Templated on the scalar so the same model runs at 32-bit for training and
// 64-bit for gradient checks.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "calibformer/error.hpp"

namespace calibformer::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::size_t size() const { return value.size(); }

  std::vector<S>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    return grad;
  }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class S>
class Var {
 public:
  using Scalar = S;

  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<S> value) {
    if (numel(shape) != value.size()) {
      throw Error(ErrorCode::kDimension, "value size does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var zeros(Shape shape) {
    const std::size_t count = numel(shape);
    return constant(std::move(shape), std::vector<S>(count, S(0)));
  }

  static Var parameter(Shape shape, std::vector<S> value) {
    Var v = constant(std::move(shape), std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& mutable_value() { return node_->value; }
  const std::vector<S>& grad() const { return node_->grad; }
  std::vector<S>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  S item() const { return node_->value.at(0); }
  Node<S>* node() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Creates an op result. The backward closure is kept only when grad mode is
/// on and at least one input needs gradients.
template <class S>
Var<S> make_result(Shape shape, std::vector<S> value, std::vector<Var<S>> inputs,
                   std::function<void(Node<S>&)> backward) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& in : inputs) n->parents.push_back(in.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return Var<S>(std::move(n));
}

/// Runs reverse accumulation from `root` seeded with `seed` (ones if empty).
template <class S>
void backward(const Var<S>& root, const std::vector<S>& seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  // Iterative post-order DFS; graphs are deep enough to overflow recursion.
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = root.node()->grad_buffer();
  if (seed.empty()) {
    for (auto& x : g) x += S(1);
  } else {
    if (seed.size() != g.size()) throw Error(ErrorCode::kDimension, "backward seed size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

/// Parent gradient buffer when the parent needs one, otherwise nullptr.
template <class S>
S* parent_grad(Node<S>& self, std::size_t i) {
  Node<S>& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

}  // namespace calibformer::ag
