#pragma once

#include "mad/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace mad {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Single-use record of a forward pass. Ops are appended in execution order,
/// so reverse creation order is a valid topological order for backward().
///
/// Gradients are only propagated into nodes that (transitively) depend on a
/// leaf created with requires_grad, which keeps attack passes from paying for
/// weight gradients and training passes from paying for input gradients.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  /// Gradient of the last backward root with respect to `v`; zeros of the
  /// matching shape when `v` did not contribute.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root. Throws on a non-scalar root or when the
  /// tape has already been consumed.
  void backward(Var root, Real seed = 1);

  // Differentiable primitives.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, Real s);
  Var sum(Var a);
  Var mean(Var a);
  Var relu(Var a);
  Var reshape(Var a, Shape shape);
  /// input [n, in], weight [out, in], bias [out] -> [n, out]
  Var linear(Var input, Var weight, Var bias);
  /// input [n, c_in, h, w], kernel [c_out, c_in, k, k], bias [c_out] -> [n, c_out, h', w']
  Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding);
  /// Per-sample softmax cross-entropy: logits [n, C] -> [n].
  Var cross_entropy(Var logits, std::span<const int> labels);
  /// Per-sample negated, clipped margin -max(z_y - max_{j != y} z_j, -kappa): [n, C] -> [n].
  Var cw_loss(Var logits, std::span<const int> labels, Real kappa);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(const Tensor&)> backward;
  };

  Var push(Tensor value, bool requires_grad, std::function<void(const Tensor&)> backward);
  Node& node(Var v);
  const Node& node(Var v) const;
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, Tensor&& g);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace mad
