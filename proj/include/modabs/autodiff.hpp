#pragma once

#include <functional>
#include <vector>

#include "modabs/array.hpp"

namespace modabs {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Append-only record of primitive operations. Nodes only reference earlier
/// nodes, so walking ids in descending order replays the graph in exact
/// reverse topological order. One backward pass per forward graph.
class Tape {
 public:
  Var leaf(Array value, bool requires_grad = true);
  Var constant(Array value) { return leaf(std::move(value), false); }
  Var constant_scalar(double v) { return constant(Array::scalar(v)); }

  const Array& value(Var v) const { return node(v.id).value; }
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }

  /// Gradient of the last backward() target w.r.t. v. Zero for any node the
  /// loss does not depend on.
  const Array& grad(Var v) const;

  void backward(Var scalar_loss);

  int size() const { return static_cast<int>(nodes_.size()); }
  void clear();

  // --- used by op implementations ---
  using BackwardFn = std::function<void(Tape&, int self)>;
  Var record(Array value, bool requires_grad, BackwardFn backward);
  const Array& value_of(int id) const { return node(id).value; }
  const Array& grad_of(int id) const { return node(id).grad; }
  /// Accumulation buffer for a node's gradient; marks the node as reached.
  Array& grad_acc(int id);
  bool touched(int id) const { return node(id).touched; }

 private:
  struct Node {
    Array value;
    Array grad;  // allocated on first contribution
    bool requires_grad = false;
    bool touched = false;
    BackwardFn backward;
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  std::vector<Node> nodes_;
  mutable Array zero_like_;  // scratch for grad() of untouched nodes
};

// ---------------------------------------------------------------------------
// Differentiable primitives. All return new nodes on the inputs' tape.
// ---------------------------------------------------------------------------

Var add(Var a, Var b);                  // same shape
Var sub(Var a, Var b);                  // same shape
Var mul(Var a, Var b);                  // elementwise, same shape
Var scalar_mul(Var a, double c);
Var neg(Var a);
Var matmul(Var a, Var b);               // (m×k)·(k×n)
Var transpose(Var a);                   // 2-D
Var reshape(Var a, std::vector<int> shape);
Var slice_rows(Var a, int offset, int count);   // 2-D
Var slice_cols(Var a, int offset, int count);   // 2-D
Var concat_cols(const std::vector<Var>& parts); // 2-D, equal row counts
Var gather_rows(Var table, const std::vector<int>& row_ids);  // 2-D table
Var add_row_broadcast(Var mat, Var row);        // (R×C) + (C,)
Var gelu(Var a);                        // tanh approximation, smooth
Var sigmoid(Var a);                     // elementwise
Var tanh_op(Var a);                     // elementwise
Var sum_all(Var a);                     // -> scalar
Var mean_all(Var a);                    // -> scalar

/// Numerically stable softmax along `axis` (max subtraction per slice).
Var softmax(Var logits, int axis);
Array softmax(const Array& logits, int axis);

/// -log softmax(logits)[target] for a 1-D logits vector. With ignore set
/// the position contributes exactly 0 (padding contract).
Var cross_entropy(Var logits, int target, bool ignore = false);
double cross_entropy(const Array& logits, int target, bool ignore = false);

/// Mean over rows with mask set of -log softmax(row)[target[row]].
/// Rows with mask cleared are excluded from both sum and denominator.
Var masked_mean_ce(Var logits2d, const std::vector<int>& targets,
                   const std::vector<char>& mask);

/// KL(p||q) = sum p_i * ln(p_i/q_i), with 0*ln(0/q) = 0 and q clamped below
/// at 1e-12. Inputs are probability vectors of equal length.
Var kl_divergence(Var p, Var q);
double kl_divergence(const Array& p, const Array& q);

/// Mean over rows with mask set of KL(softmax(a_row) || softmax(b_row)),
/// evaluated in logit space (no clamping needed).
Var masked_mean_kl_logits(Var a2d, Var b2d, const std::vector<char>& mask);

/// Row-wise layer normalisation with learned gain/bias (epsilon 1e-5).
Var layer_norm(Var x2d, Var gain, Var bias);

enum class LimitKind { Sigmoid, Tanh, None };

/// Bounded monotone map applied to divergence values.
Var apply_limit(Var x, LimitKind kind);
double apply_limit(double x, LimitKind kind);

}  // namespace modabs
