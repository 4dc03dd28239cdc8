#include "dql/tape.hpp"

#include <cmath>
#include <string>

#include "dql/errors.hpp"

namespace dql {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::push(Matrix value, bool requires_grad, BackwardFn backward) {
  if (!value.allFinite())
    throw NonFiniteError("forward", step_tag_,
                         "non-finite value in forward pass" +
                             (step_tag_ >= 0 ? " at diffusion step " + std::to_string(step_tag_)
                                             : std::string()));
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.step_tag = step_tag_;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Matrix value) { return push(std::move(value), true, nullptr); }

std::vector<Var> Tape::bind(const ParamSet& params, bool requires_grad) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back(push(params.value(i), requires_grad, nullptr));
  return out;
}

ParamSet Tape::gradients(std::span<const Var> bound, const ParamSet& like) const {
  if (bound.size() != like.size()) throw DimensionError("bound leaves do not match parameter set");
  ParamSet out = like.zeros_like();
  for (std::size_t i = 0; i < bound.size(); ++i) {
    const Matrix& g = nodes_.at(bound[i].id()).grad;
    if (g.size() > 0) out.value(i) = g;
  }
  return out;
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::invalid_argument("backward: variable from another tape");
  if (root.rows() != 1 || root.cols() != 1)
    throw DimensionError("backward: root must be a scalar (1x1) node");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (!n.grad.allFinite())
      throw NonFiniteError("backward", n.step_tag,
                           "non-finite gradient in backward pass" +
                               (n.step_tag >= 0 ? " at diffusion step " + std::to_string(n.step_tag)
                                                : std::string()));
    if (n.backward) {
      // Interior gradients are consumed here; only leaves keep theirs.
      const Matrix g = std::move(n.grad);
      n.backward(*this, g);
    }
  }
}

namespace {

bool any_requires(Tape& t, std::initializer_list<Var> vars) {
  for (const Var& v : vars)
    if (t.requires_grad(v.id())) return true;
  return false;
}

void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("variables live on different tapes");
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
}

}  // namespace

Var linear(Var w, Var b, Var x) {
  check_same_tape(w, x);
  check_same_tape(b, x);
  Tape& t = *x.tape();
  if (w.cols() != x.rows() || b.rows() != w.rows() || b.cols() != 1)
    throw DimensionError("linear: weight " + std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()) + " cannot map input with " +
                         std::to_string(x.rows()) + " rows");
  Matrix out = w.value() * x.value();
  out.colwise() += b.value().col(0);
  const int wi = w.id(), bi = b.id(), xi = x.id();
  return t.push(std::move(out), any_requires(t, {w, b, x}), [wi, bi, xi](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(wi)) tp.accumulate(wi, g * tp.value(xi).transpose());
    if (tp.requires_grad(bi)) tp.accumulate(bi, g.rowwise().sum());
    if (tp.requires_grad(xi)) tp.accumulate(xi, tp.value(wi).transpose() * g);
  });
}

Var mish(Var x) {
  Tape& t = *x.tape();
  const int xi = x.id();
  Matrix out = dql::mish(x.value());
  return t.push(std::move(out), t.requires_grad(xi), [xi](Tape& tp, const Matrix& g) {
    tp.accumulate(xi, g.cwiseProduct(mish_derivative(tp.value(xi))));
  });
}

Var tanh(Var x) {
  Tape& t = *x.tape();
  const int xi = x.id();
  Matrix out = x.value().array().tanh().matrix();
  const int oi = static_cast<int>(t.size());
  return t.push(std::move(out), t.requires_grad(xi), [xi, oi](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(oi);
    tp.accumulate(xi, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var exp(Var x) {
  Tape& t = *x.tape();
  const int xi = x.id();
  Matrix out = x.value().array().exp().matrix();
  const int oi = static_cast<int>(t.size());
  return t.push(std::move(out), t.requires_grad(xi), [xi, oi](Tape& tp, const Matrix& g) {
    tp.accumulate(xi, g.cwiseProduct(tp.value(oi)));
  });
}

Var square(Var x) {
  Tape& t = *x.tape();
  const int xi = x.id();
  Matrix out = x.value().cwiseAbs2();
  return t.push(std::move(out), t.requires_grad(xi), [xi](Tape& tp, const Matrix& g) {
    tp.accumulate(xi, 2.0 * g.cwiseProduct(tp.value(xi)));
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "add");
  Tape& t = *a.tape();
  const int ai = a.id(), bi = b.id();
  return t.push(a.value() + b.value(), any_requires(t, {a, b}), [ai, bi](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, g);
    tp.accumulate(bi, g);
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  const int ai = a.id(), bi = b.id();
  return t.push(a.value() - b.value(), any_requires(t, {a, b}), [ai, bi](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, g);
    if (tp.requires_grad(bi)) tp.accumulate(bi, -g);
  });
}

Var cmul(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "cmul");
  Tape& t = *a.tape();
  const int ai = a.id(), bi = b.id();
  return t.push(a.value().cwiseProduct(b.value()), any_requires(t, {a, b}),
                [ai, bi](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(ai)) tp.accumulate(ai, g.cwiseProduct(tp.value(bi)));
                  if (tp.requires_grad(bi)) tp.accumulate(bi, g.cwiseProduct(tp.value(ai)));
                });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape();
  const int ai = a.id();
  return t.push(c * a.value(), t.requires_grad(ai),
                [ai, c](Tape& tp, const Matrix& g) { tp.accumulate(ai, c * g); });
}

Var add_scalar(Var a, double c) {
  Tape& t = *a.tape();
  const int ai = a.id();
  Matrix out = a.value().array() + c;
  return t.push(std::move(out), t.requires_grad(ai),
                [ai](Tape& tp, const Matrix& g) { tp.accumulate(ai, g); });
}

Var add_const(Var a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw DimensionError("add_const: shape mismatch");
  Tape& t = *a.tape();
  const int ai = a.id();
  return t.push(a.value() + c, t.requires_grad(ai),
                [ai](Tape& tp, const Matrix& g) { tp.accumulate(ai, g); });
}

Var cmul_const(Var a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw DimensionError("cmul_const: shape mismatch");
  Tape& t = *a.tape();
  const int ai = a.id();
  return t.push(a.value().cwiseProduct(c), t.requires_grad(ai),
                [ai, c](Tape& tp, const Matrix& g) { tp.accumulate(ai, g.cwiseProduct(c)); });
}

Var broadcast_cols(Var column, Eigen::Index cols) {
  if (column.cols() != 1) throw DimensionError("broadcast_cols: expected a column vector");
  Tape& t = *column.tape();
  const int ci = column.id();
  return t.push(column.value().replicate(1, cols), t.requires_grad(ci),
                [ci](Tape& tp, const Matrix& g) { tp.accumulate(ci, g.rowwise().sum()); });
}

Var scale_rows(Var a, const Vector& factors) {
  if (factors.size() != a.rows()) throw DimensionError("scale_rows: factor count mismatch");
  Tape& t = *a.tape();
  const int ai = a.id();
  Matrix out = factors.asDiagonal() * a.value();
  return t.push(std::move(out), t.requires_grad(ai), [ai, factors](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, factors.asDiagonal() * g);
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("vstack: no inputs");
  Tape& t = *parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool req = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("vstack: variables on different tapes");
    if (p.cols() != cols) throw DimensionError("vstack: column counts differ");
    rows += p.rows();
    req = req || t.requires_grad(p.id());
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), req, [ids, heights](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) tp.accumulate(ids[k], g.middleRows(off, heights[k]));
      off += heights[k];
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw DimensionError("slice_rows: range out of bounds");
  Tape& t = *a.tape();
  const int ai = a.id();
  const Eigen::Index rows = a.rows();
  Matrix out = a.value().middleRows(start, count);
  return t.push(std::move(out), t.requires_grad(ai), [ai, start, count, rows](Tape& tp, const Matrix& g) {
    Matrix full = Matrix::Zero(rows, g.cols());
    full.middleRows(start, count) = g;
    tp.accumulate(ai, full);
  });
}

Var clamp_rows(Var a, const Vector& lo, const Vector& hi) {
  if (lo.size() != a.rows() || hi.size() != a.rows())
    throw DimensionError("clamp_rows: bound vectors must match row count");
  Tape& t = *a.tape();
  const int ai = a.id();
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  Matrix pass(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double v = x(i, j);
      out(i, j) = std::clamp(v, lo(i), hi(i));
      pass(i, j) = (v > lo(i) && v < hi(i)) ? 1.0 : 0.0;
    }
  }
  return t.push(std::move(out), t.requires_grad(ai), [ai, pass = std::move(pass)](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, g.cwiseProduct(pass));
  });
}

Var clamp(Var a, double lo, double hi) {
  return clamp_rows(a, Vector::Constant(a.rows(), lo), Vector::Constant(a.rows(), hi));
}

Var sum_rows(Var a) {
  Tape& t = *a.tape();
  const int ai = a.id();
  const Eigen::Index rows = a.rows();
  return t.push(a.value().colwise().sum(), t.requires_grad(ai), [ai, rows](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, g.replicate(rows, 1));
  });
}

Var logsumexp_rows(Var a) {
  Tape& t = *a.tape();
  const int ai = a.id();
  const Matrix& x = a.value();
  Matrix out(1, x.cols());
  Matrix weights(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double m = x.col(j).maxCoeff();
    const Vector e = (x.col(j).array() - m).exp().matrix();
    const double s = e.sum();
    out(0, j) = m + std::log(s);
    weights.col(j) = e / s;
  }
  return t.push(std::move(out), t.requires_grad(ai), [ai, weights = std::move(weights)](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, weights * g.asDiagonal());
  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  const int ai = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), t.requires_grad(ai), [ai, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ai, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw DimensionError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var mlp(std::span<const Var> params, const MlpSpec& spec, Var input) {
  if (input.rows() != spec.input_dim)
    throw DimensionError("MLP input has " + std::to_string(input.rows()) + " rows, expected " +
                         std::to_string(spec.input_dim));
  if (params.size() < static_cast<std::size_t>(2 * spec.num_layers()))
    throw DimensionError("MLP parameter list is missing layers");
  Var h = input;
  for (int l = 0; l < spec.num_layers(); ++l) {
    h = linear(params[2 * l], params[2 * l + 1], h);
    if (l < spec.depth && spec.activation == Activation::Mish) h = mish(h);
  }
  return h;
}

}  // namespace dql
