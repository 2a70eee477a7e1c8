#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cxrinf/tensor.hpp"

namespace cxrinf {

/// A learnable tensor together with its gradient accumulator and Adam moments.
struct Parameter {
  std::string name;
  std::string group;  // "encoder", "decoder" or "head"
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  bool trainable = true;

  void zero_grad();
};

class Graph;

struct Node {
  Graph* graph = nullptr;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  /// Gradient buffer, allocated (zeroed) on first use.
  Tensor& grad_buffer();
};

using Var = Node*;

enum class GradMode {
  kNone,       // inference only; no closures retained
  kTrainable,  // gradients flow to trainable parameters
  kAll,        // every op node carries a gradient (feature-map attribution)
};

/// Reverse-mode tape. Nodes are recorded in creation order, which is a
/// topological order, and replayed backwards.
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::kTrainable) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  GradMode mode() const { return mode_; }

  Var constant(Tensor t);
  Var parameter(Parameter& p);

  /// Record an op result. `backward` reads node.grad and pushes into parents.
  Var record(Tensor value, std::initializer_list<Var> parents,
             std::function<void(Node&)> backward);
  Var record(Tensor value, const std::vector<Var>& parents,
             std::function<void(Node&)> backward);

  /// Seed `root` with `seed` and propagate. Trainable parameter gradients are
  /// accumulated into Parameter::grad.
  void backward(Var root, const Tensor& seed);

  void tag(const std::string& name, Var v) { taps_[name] = v; }
  Var tap(const std::string& name) const;
  std::vector<std::string> tap_names() const;

  std::size_t node_count() const { return nodes_.size(); }
  /// Sum of value sizes over recorded nodes, in doubles.
  std::size_t value_footprint() const;

 private:
  GradMode mode_;
  std::deque<Node> nodes_;
  std::vector<std::pair<Var, Parameter*>> param_nodes_;
  std::map<std::string, Var> taps_;
};

}  // namespace cxrinf
