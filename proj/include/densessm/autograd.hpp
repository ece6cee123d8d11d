#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "densessm/tensor.hpp"

namespace densessm {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool grad_ready = false;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long tapes (recurrent rollouts) would otherwise be released recursively.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(parents);
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n && n.use_count() == 1) {
        for (auto& p : n->parents) pending.push_back(std::move(p));
        n->parents.clear();
        n->backward_fn = nullptr;
      }
    }
  }

  Tensor<T>& grad_buffer() {
    if (!grad_ready) {
      grad = Tensor<T>(value.shape());
      grad_ready = true;
    }
    return grad;
  }

  /// Pointer into the parent's gradient buffer, or nullptr if that parent
  /// does not take gradients.
  T* parent_grad(std::size_t i) {
    Node& p = *parents[i];
    if (!p.requires_grad) return nullptr;
    return p.grad_buffer().mutable_ptr();
  }
};

/// Handle to a value recorded on the define-by-run tape. Copies share the
/// underlying node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor<T> grad() const {
    if (node_->grad_ready) return node_->grad;
    return Tensor<T>(node_->value.shape());
  }

  void zero_grad() {
    node_->grad = Tensor<T>();
    node_->grad_ready = false;
  }

  Tensor<T>& mutable_value() {
    if (!node_->leaf) throw UsageError("only leaf values may be mutated in place");
    return node_->value;
  }

  void set_value(Tensor<T> v) {
    if (v.shape() != shape()) {
      throw DimensionError("set_value shape " + shape_str(v.shape()) + " vs " + shape_str(shape()));
    }
    mutable_value() = std::move(v);
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive, operations on this thread do not record backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Wraps an already computed forward value as a tape node. The value is
/// checked for NaN/Inf. When recording is enabled and any input requires a
/// gradient, the node keeps its inputs and `backward_fn`.
template <class T>
Var<T> record(Tensor<T> out, std::vector<Var<T>> inputs, const char* op,
              std::function<void(Node<T>&)> backward_fn) {
  require_finite(out, op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  node->op = op;
  node->leaf = false;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

/// Reverse sweep from a scalar loss. Leaf gradients accumulate; gradients of
/// intermediate nodes are reset at the start of every sweep.
template <class T>
void backward(const Var<T>& loss);

template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool decay = true;  // decoupled weight decay applies (matrix weights only)
};

/// Named parameters in registration order. Names are unique.
template <class T>
class ParameterRegistry {
 public:
  Var<T> add(std::string name, Tensor<T> init, bool decay);

  std::vector<Parameter<T>>& params() noexcept { return params_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>* find(const std::string& name);
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t count_scalars() const;
  void zero_grad();

 private:
  std::vector<Parameter<T>> params_;
};

extern template void backward<float>(const Var<float>&);
extern template void backward<double>(const Var<double>&);
extern template class ParameterRegistry<float>;
extern template class ParameterRegistry<double>;

}  // namespace densessm
