// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace moe {

using Shape = std::vector<int>;

inline int numel(const Shape& shape) {
  int n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

class Tape;

/// Dense fp64 tensor, row-major. A Tensor optionally carries a handle into a
/// Tape node; a Tensor with no handle is a constant and contributes zero
/// gradient everywhere.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (static_cast<int>(values.size()) != numel(shape))
      throw std::invalid_argument("value count does not match shape " + shape_str(shape));
  }

  static Tensor zeros(const Shape& s) { return Tensor(s, std::vector<double>(numel(s), 0.0)); }
  static Tensor full(const Shape& s, double v) { return Tensor(s, std::vector<double>(numel(s), v)); }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  int size() const { return static_cast<int>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool on_tape() const { return node >= 0; }

  double item() const {
    if (values.size() != 1) throw std::invalid_argument("item() requires a single-element tensor");
    return values[0];
  }
};

/// Duplicate of `t` detached from any tape: identical forward values, no
/// gradient flow. Idempotent.
inline Tensor detach(const Tensor& t) { return Tensor(t.shape, t.values); }

/// Gradients produced by one backward sweep, keyed by tape node.
class GradientMap {
 public:
  explicit GradientMap(std::vector<std::vector<double>> by_node) : by_node_(std::move(by_node)) {}

  /// dLoss/dParam; zero tensor when the parameter was not reached (or is a
  /// constant).
  Tensor grad(const Tensor& param) const {
    Tensor g = Tensor::zeros(param.shape);
    if (param.on_tape() && param.node < static_cast<int>(by_node_.size()) &&
        !by_node_[param.node].empty()) {
      if (by_node_[param.node].size() != g.values.size())
        throw std::logic_error("gradient size mismatch");
      g.values = by_node_[param.node];
    }
    return g;
  }

  bool reached(const Tensor& t) const {
    return t.on_tape() && t.node < static_cast<int>(by_node_.size()) && !by_node_[t.node].empty();
  }

 private:
  std::vector<std::vector<double>> by_node_;
};

/// Reverse-mode tape. Operations are recorded in topological order (inputs
/// always precede consumers); one backward sweep visits each recorded node at
/// most once and sums gradients for shared inputs.
///
/// Backward rules are user-registerable through `record` / `make_op`: a rule
/// receives the output gradient and one accumulation pointer per input
/// (nullptr for constant inputs) and must += its contribution.
class Tape {
 public:
  using Backward = std::function<void(const double* grad_out, const std::vector<double*>& grad_in)>;

  /// Registers a differentiable leaf (parameter) holding a copy of `t`.
  Tensor leaf(const Tensor& t) {
    Tensor out(t.shape, t.values);
    out.tape = this;
    out.node = add_node({}, out.size(), nullptr);
    return out;
  }

  /// Records one operation. `inputs` are the operands in the order the
  /// backward rule expects; constants are tracked as node -1.
  Tensor record(const std::vector<const Tensor*>& inputs, Shape out_shape,
                std::vector<double> out_values, Backward back) {
    std::vector<int> ids(inputs.size(), -1);
    for (size_t i = 0; i < inputs.size(); ++i) {
      const Tensor* in = inputs[i];
      if (in->on_tape()) {
        if (in->tape != this) throw std::invalid_argument("operands live on different tapes");
        ids[i] = in->node;
      }
    }
    Tensor out(std::move(out_shape), std::move(out_values));
    out.tape = this;
    out.node = add_node(std::move(ids), out.size(), std::move(back));
    return out;
  }

  /// Reverse sweep from a scalar loss. Returns gradients for every reached
  /// node; unreached parameters read as zero through GradientMap.
  GradientMap backward(const Tensor& loss) const {
    if (!loss.on_tape() || loss.tape != this)
      throw std::invalid_argument("backward: loss is not on this tape");
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node].assign(1, 1.0);
    for (int i = loss.node; i >= 0; --i) {
      const Node& n = nodes_[i];
      if (grads[i].empty() || !n.back) continue;
      std::vector<double*> gin(n.inputs.size(), nullptr);
      for (size_t j = 0; j < n.inputs.size(); ++j) {
        int id = n.inputs[j];
        if (id < 0) continue;
        if (grads[id].empty()) grads[id].assign(nodes_[id].size, 0.0);
        gin[j] = grads[id].data();
      }
      n.back(grads[i].data(), gin);
    }
    return GradientMap(std::move(grads));
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> inputs;
    int size = 0;
    Backward back;
  };

  int add_node(std::vector<int> inputs, int size, Backward back) {
    nodes_.push_back(Node{std::move(inputs), size, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

/// Builds an op result from explicit forward values and a backward rule.
/// Records on the (unique) tape of the on-tape inputs; with no on-tape input
/// the result is a constant and the rule is dropped.
inline Tensor make_op(const std::vector<const Tensor*>& inputs, Shape out_shape,
                      std::vector<double> out_values, Tape::Backward back) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape && t->tape != tape) throw std::invalid_argument("operands live on different tapes");
    tape = t->tape;
  }
  if (!tape) return Tensor(std::move(out_shape), std::move(out_values));
  return tape->record(inputs, std::move(out_shape), std::move(out_values), std::move(back));
}

}  // namespace moe
