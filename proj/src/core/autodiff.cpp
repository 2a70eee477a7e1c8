#include "cxrinf/autodiff.hpp"

#include <stdexcept>

namespace cxrinf {

void Parameter::zero_grad() {
  if (grad.empty()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

Var Graph::constant(Tensor t) {
  Node& n = nodes_.emplace_back();
  n.graph = this;
  n.value = std::move(t);
  n.requires_grad = mode_ == GradMode::kAll;
  return &n;
}

Var Graph::parameter(Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.graph = this;
  n.value = p.value;
  n.requires_grad = (mode_ == GradMode::kTrainable && p.trainable) ||
                    mode_ == GradMode::kAll;
  // Attribution graphs leave Parameter::grad untouched.
  if (n.requires_grad && mode_ == GradMode::kTrainable) param_nodes_.emplace_back(&n, &p);
  return &n;
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents,
                  std::function<void(Node&)> backward) {
  return record(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& parents,
                  std::function<void(Node&)> backward) {
  Node& n = nodes_.emplace_back();
  n.graph = this;
  n.value = std::move(value);
  if (mode_ == GradMode::kAll) {
    n.requires_grad = true;
  } else if (mode_ == GradMode::kTrainable) {
    for (Var p : parents) {
      if (p != nullptr && p->requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return &n;
}

void Graph::backward(Var root, const Tensor& seed) {
  if (mode_ == GradMode::kNone) {
    throw std::logic_error("backward on a graph recorded without gradients");
  }
  if (!(seed.shape() == root->value.shape())) {
    throw std::invalid_argument("seed shape " + seed.shape().str() +
                                " does not match root " +
                                root->value.shape().str());
  }
  if (!root->requires_grad) return;
  root->grad_buffer().add_inplace(seed);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
  for (auto& [node, param] : param_nodes_) {
    if (!param->trainable || node->grad.empty()) continue;
    if (param->grad.empty()) param->grad = Tensor(param->value.shape());
    param->grad.add_inplace(node->grad);
  }
}

Var Graph::tap(const std::string& name) const {
  auto it = taps_.find(name);
  if (it == taps_.end()) return nullptr;
  return it->second;
}

std::vector<std::string> Graph::tap_names() const {
  std::vector<std::string> names;
  for (const auto& [k, v] : taps_) names.push_back(k);
  return names;
}

std::size_t Graph::value_footprint() const {
  std::size_t total = 0;
  for (const Node& n : nodes_) total += n.value.size();
  return total;
}

}  // namespace cxrinf
