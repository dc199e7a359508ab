#pragma once

// Dense row-major f64 arrays wired into a reverse-mode computation graph.
//
// A Value is a cheap shared handle to a graph node. Operations in ops.hpp
// create new nodes whose backward closures accumulate (+=) into the grad
// buffers of their operands. backward() walks the graph once in reverse
// topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "difsr/errors.hpp"

namespace difsr::numcore {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grad buffers.
  std::function<void(const Node&)> backward_rule;
};

class Value {
 public:
  Value() = default;

  static Value constant(Shape shape, std::vector<double> data) {
    return Value(make_node(std::move(shape), std::move(data), false));
  }
  static Value constant(Shape shape) {
    const auto n = element_count(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }
  /// Leaf that accumulates gradients (model parameters, probed inputs).
  static Value parameter(Shape shape, std::vector<double> data) {
    return Value(make_node(std::move(shape), std::move(data), true));
  }
  static Value scalar(double v) { return constant({}, {v}); }

  /// Internal: node produced by an operation. Gradient tracking follows the operands.
  static Value from_op(const char* op, Shape shape, std::vector<double> data,
                       std::vector<Value> operands) {
    bool needs_grad = false;
    for (const auto& v : operands) needs_grad = needs_grad || v.requires_grad();
    auto node = make_node(std::move(shape), std::move(data), needs_grad);
    node->op = op;
    if (needs_grad) {
      node->parents.reserve(operands.size());
      for (auto& v : operands) node->parents.push_back(v.node_);
    }
    return Value(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }
  const char* op() const { return node_->op; }

  std::span<const double> data() const { return node_->data; }
  /// Writable storage. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  double item() const {
    if (size() != 1) throw ContractError("item() on value of shape " + shape_string(shape()));
    return node_->data[0];
  }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    node_->backward_done = false;
  }

  /// Sets the backward rule of a freshly created op node.
  void set_backward(std::function<void(const Node&)> rule) {
    if (node_->requires_grad) node_->backward_rule = std::move(rule);
  }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& handle() const { return node_; }

  /// Same node.
  bool is(const Value& other) const { return node_ == other.node_; }

 private:
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data, bool grad) {
    if (data.size() != element_count(shape)) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = grad;
    if (grad) node->grad.assign(node->data.size(), 0.0);
    return node;
  }

  std::shared_ptr<Node> node_;
};

/// Nodes reachable from `root` that require gradients, ordered so every node
/// precedes its parents (reverse topological order). Each node appears once.
inline std::vector<Node*> reverse_topological_order(const Value& root) {
  std::vector<Node*> post_order;
  std::unordered_set<const Node*> visited;
  // Iterative DFS; the pair holds the node and the next parent to visit.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  visited.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    post_order.push_back(node);
    stack.pop_back();
  }
  return {post_order.rbegin(), post_order.rend()};
}

/// Seeds d(root)/d(root) = 1 and propagates to every node that requires gradients.
inline void backward(const Value& root) {
  if (!root.defined() || root.size() != 1 || !root.shape().empty()) {
    throw ContractError("backward requires a scalar root, got shape " +
                        (root.defined() ? shape_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) return;
  Node& top = root.node();
  if (top.backward_done) {
    throw ContractError("backward already ran on this graph; reset gradients before reuse");
  }
  top.backward_done = true;
  top.grad[0] += 1.0;
  for (Node* node : reverse_topological_order(root)) {
    if (node->backward_rule) node->backward_rule(*node);
  }
}

}  // namespace difsr::numcore
