#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dql/tensornet.hpp"

namespace dql {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  // Scalar value of a 1x1 node.
  double scalar() const { return value()(0, 0); }

  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Dynamic reverse-mode tape over column-batched matrices.
///
/// Nodes are appended in evaluation order, so replaying them backwards is a
/// valid topological order. Every value and every propagated gradient is
/// checked for finiteness; failures raise NonFiniteError carrying the
/// current step tag (the diffusion index while a reverse chain is recorded).
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  // One leaf per array, in ParamSet order.
  std::vector<Var> bind(const ParamSet& params, bool requires_grad = true);
  // Gradients of the last backward() for leaves created by bind().
  ParamSet gradients(std::span<const Var> bound, const ParamSet& like) const;

  void backward(Var root);

  const Matrix& value(Var v) const { return nodes_.at(v.id()).value; }
  // Gradient of a leaf after backward(); zero-sized if none reached it.
  const Matrix& grad(Var v) const { return nodes_.at(v.id()).grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Matrix& value(int id) const { return nodes_[id].value; }

  void set_step_tag(int step) noexcept { step_tag_ = step; }
  int step_tag() const noexcept { return step_tag_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var push(Matrix value, bool requires_grad, BackwardFn backward);
  void accumulate(int id, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    int step_tag = -1;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  int step_tag_ = -1;
};

// Dense layer: W x + b broadcast over columns.
Var linear(Var w, Var b, Var x);
Var mish(Var x);
Var tanh(Var x);
Var exp(Var x);
Var square(Var x);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var cmul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var add_const(Var a, const Matrix& c);
Var cmul_const(Var a, const Matrix& c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

// (r x 1) -> (r x cols)
Var broadcast_cols(Var column, Eigen::Index cols);
// Per-row scaling by a column vector broadcast over the batch.
Var scale_rows(Var a, const Vector& factors);
Var vstack(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
// Element-wise clamp per row to [lo(r), hi(r)]; zero gradient where clamped.
Var clamp_rows(Var a, const Vector& lo, const Vector& hi);
Var clamp(Var a, double lo, double hi);

// Column sums -> (1 x cols)
Var sum_rows(Var a);
// Per-column log-sum-exp over rows -> (1 x cols)
Var logsumexp_rows(Var a);
Var sum(Var a);
Var mean(Var a);

Var mlp(std::span<const Var> params, const MlpSpec& spec, Var input);

}  // namespace dql
