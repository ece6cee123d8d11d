#include "densessm/autograd.hpp"

#include <sstream>
#include <unordered_set>

namespace densessm {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

std::string_view dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view name) {
  if (name == "f32" || name == "float32") return DType::f32;
  if (name == "f64" || name == "float64") return DType::f64;
  throw ConfigError("unknown dtype '" + std::string(name) + "' (expected f32 or f64)");
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || !loss.requires_grad()) {
    throw UsageError("backward through a value that was not recorded on the tape");
  }
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }

  // Iterative post-order DFS; recurrent rollouts make the graph deep.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->leaf) {
      n->grad = Tensor<T>();
      n->grad_ready = false;
    }
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
  }
}

template <class T>
Var<T> ParameterRegistry<T>::add(std::string name, Tensor<T> init, bool decay) {
  if (find(name) != nullptr) throw ArgumentError("duplicate parameter name '" + name + "'");
  Var<T> v(std::move(init), true);
  params_.push_back(Parameter<T>{std::move(name), v, decay});
  return v;
}

template <class T>
const Parameter<T>* ParameterRegistry<T>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <class T>
Parameter<T>* ParameterRegistry<T>::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <class T>
std::size_t ParameterRegistry<T>::count_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.numel();
  return n;
}

template <class T>
void ParameterRegistry<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template class ParameterRegistry<float>;
template class ParameterRegistry<double>;

}  // namespace densessm
