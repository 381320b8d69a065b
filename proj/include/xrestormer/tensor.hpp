#pragma once

// Dense row-major tensors with a dynamically recorded gradient graph.
//
// Every Tensor is a shared handle onto a node holding shape, data and (when
// gradients flow) the backward rule of the primitive that produced it.
// Copying a Tensor copies the handle, not the buffer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xrestormer/errors.hpp"

namespace xrestormer {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold f32 or f64");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<NodeType>()) {
    node_->data.assign(xrestormer::numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<NodeType>()) {
    if (values.size() != xrestormer::numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->data = std::move(values);
    node_->shape = std::move(shape);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  // Spans alias the node buffer; taking one from a temporary would dangle.
  std::span<T> data() & { return node_->data; }
  std::span<const T> data() const& { return node_->data; }
  std::span<const T> data() && = delete;
  std::vector<T> to_vector() const { return node_->data; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  /// Element access by full multi-index (slow; tests and tools only).
  T at(std::initializer_list<std::size_t> index) const {
    return node_->data[flat_index(index)];
  }
  void set(std::initializer_list<std::size_t> index, T value) {
    node_->data[flat_index(index)] = value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  Tensor& set_requires_grad(bool flag) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  /// Copy of the accumulated gradient; zeros when none was accumulated.
  Tensor grad() const {
    if (node_->grad.empty()) return Tensor(shape());
    return Tensor(shape(), node_->grad);
  }
  std::span<const T> grad_data() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Fresh leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const char* op_name() const { return node_->op; }
  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= node_->shape[axis]) throw ShapeError("index out of range for " + shape_str(shape()));
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return flat;
  }

  std::shared_ptr<NodeType> node_;
};

namespace detail {

/// Marks `out` as produced by `op` from `inputs` when any input carries
/// gradient and recording is enabled. `fn` reads out.grad and accumulates into
/// the grad buffers of inputs that require it.
template <class T>
void record(Tensor<T>& out, const char* op, std::initializer_list<Tensor<T>> inputs,
            std::function<void(Node<T>&)> fn) {
  if (!grad_mode()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return;
  auto* node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  node->op = op;
  for (const auto& t : inputs) {
    if (t.defined()) node->inputs.push_back(t.node_ptr());
  }
  node->backward = std::move(fn);
}

}  // namespace detail

/// The recorded primitives reachable from a root, in topological order
/// (every node appears after all of its inputs).
template <class T>
class GradTape {
 public:
  using NodeType = detail::Node<T>;

  static GradTape from(const Tensor<T>& root) {
    GradTape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<NodeType*> visited;
    // Iterative post-order DFS: (node, next input index).
    std::vector<std::pair<NodeType*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        NodeType* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<NodeType*>& nodes() const { return order_; }

  /// Propagates d(root)/d(node) from the last node to the first. Each node is
  /// visited exactly once; leaves accumulate, intermediates are released.
  void replay() {
    if (order_.empty()) return;
    for (NodeType* n : order_) {
      if (!n->is_leaf) n->grad.clear();
    }
    NodeType* root = order_.back();
    auto& seed = root->grad_buffer();
    for (auto& g : seed) g += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      NodeType* n = *it;
      if (n->is_leaf) continue;
      if (n->backward && !n->grad.empty()) n->backward(*n);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

 private:
  std::vector<NodeType*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf with requires_grad.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1 || loss.rank() != 0) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not depend on any requires_grad leaf");
  }
  GradTape<T>::from(loss).replay();
}

}  // namespace xrestormer
