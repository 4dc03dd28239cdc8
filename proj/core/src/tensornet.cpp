#include "dql/tensornet.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dql/errors.hpp"

namespace dql {

void ParamSet::add(std::string name, Matrix value) {
  if (find(name) >= 0) throw ConfigError("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::ptrdiff_t ParamSet::find(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<std::ptrdiff_t>(i);
  return -1;
}

const Matrix& ParamSet::at(std::string_view name) const {
  const auto i = find(name);
  if (i < 0) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return values_[static_cast<std::size_t>(i)];
}

Matrix& ParamSet::at(std::string_view name) {
  const auto i = find(name);
  if (i < 0) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return values_[static_cast<std::size_t>(i)];
}

std::size_t ParamSet::num_scalars() const noexcept {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> out;
  out.reserve(num_scalars());
  for (const auto& v : values_) out.insert(out.end(), v.data(), v.data() + v.size());
  return out;
}

void ParamSet::assign_flat(std::span<const double> flat) {
  if (flat.size() != num_scalars())
    throw DimensionError("flat parameter vector has " + std::to_string(flat.size()) +
                         " entries, expected " + std::to_string(num_scalars()));
  std::size_t offset = 0;
  for (auto& v : values_) {
    std::copy_n(flat.data() + offset, v.size(), v.data());
    offset += static_cast<std::size_t>(v.size());
  }
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < values_.size(); ++i)
    out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  return out;
}

bool ParamSet::same_shape(const ParamSet& other) const noexcept {
  if (other.values_.size() != values_.size()) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].rows() != other.values_[i].rows() ||
        values_[i].cols() != other.values_[i].cols())
      return false;
  }
  return true;
}

bool ParamSet::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(),
                     [](const Matrix& m) { return m.allFinite(); });
}

double ParamSet::max_abs_diff(const ParamSet& other) const {
  if (!same_shape(other)) throw DimensionError("parameter sets differ in shape");
  double d = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i].size() > 0)
      d = std::max(d, (values_[i] - other.values_[i]).cwiseAbs().maxCoeff());
  return d;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  return a.names_ == b.names_ && a.same_shape(b) &&
         std::equal(a.values_.begin(), a.values_.end(), b.values_.begin(),
                    [](const Matrix& x, const Matrix& y) { return x == y; });
}

void MlpSpec::validate() const {
  if (input_dim < 1 || hidden_dim < 1 || depth < 1 || output_dim < 1)
    throw ConfigError("MLP dimensions must all be >= 1 (input " + std::to_string(input_dim) +
                      ", hidden " + std::to_string(hidden_dim) + ", depth " +
                      std::to_string(depth) + ", output " + std::to_string(output_dim) + ")");
}

double softplus(double x) noexcept {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2), so one exp per
// element suffices. Above the cutoff the ratio is 1 to double precision.
namespace {
constexpr double kMishCutoff = 20.0;
}

double mish(double x) noexcept {
  if (x > kMishCutoff) return x;
  const double w = std::exp(x);
  const double n = w * (w + 2.0);
  return x * n / (n + 2.0);
}

double mish_derivative(double x) noexcept {
  if (x > kMishCutoff) return 1.0;
  const double w = std::exp(x);
  const double n = w * (w + 2.0);
  const double d = n + 2.0;
  return n / d + x * 4.0 * w * (w + 1.0) / (d * d);
}

// Element by element through the scalar forms: a vectorized exp rounds
// differently from the scalar tail, which would make a value depend on where
// it sits in the batch.
Matrix mish(const Matrix& x) {
  return x.unaryExpr([](double v) { return mish(v); });
}

Matrix mish_derivative(const Matrix& x) {
  return x.unaryExpr([](double v) { return mish_derivative(v); });
}

Vector time_embed(int step, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw ConfigError("time embedding dimension must be even and >= 2, got " +
                      std::to_string(dim));
  if (step < 0) throw ConfigError("diffusion step must be non-negative");
  Vector out(dim);
  for (int k = 0; k < dim / 2; ++k) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * k) / dim);
    const double arg = static_cast<double>(step) / freq;
    out(2 * k) = std::sin(arg);
    out(2 * k + 1) = std::cos(arg);
  }
  return out;
}

namespace {

int layer_in(const MlpSpec& spec, int layer) {
  return layer == 0 ? spec.input_dim : spec.hidden_dim;
}

int layer_out(const MlpSpec& spec, int layer) {
  return layer == spec.depth ? spec.output_dim : spec.hidden_dim;
}

void apply_activation(Matrix& h, Activation act) {
  if (act == Activation::Mish) h = mish(h);
}

}  // namespace

ParamSet mlp_init(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int in = layer_in(spec, l);
    const int out = layer_out(spec, l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Matrix w(out, in);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
    Matrix b(out, 1);
    for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, 0) = (2.0 * rng.uniform() - 1.0) * bound;
    p.add("w" + std::to_string(l), std::move(w));
    p.add("b" + std::to_string(l), std::move(b));
  }
  return p;
}

ParamSet mlp_zeros(const MlpSpec& spec) {
  spec.validate();
  ParamSet p;
  for (int l = 0; l < spec.num_layers(); ++l) {
    p.add("w" + std::to_string(l), Matrix::Zero(layer_out(spec, l), layer_in(spec, l)));
    p.add("b" + std::to_string(l), Matrix::Zero(layer_out(spec, l), 1));
  }
  return p;
}

Matrix mlp_forward(const ParamSet& params, const MlpSpec& spec, const Matrix& input) {
  if (input.rows() != spec.input_dim)
    throw DimensionError("MLP input has " + std::to_string(input.rows()) + " rows, expected " +
                         std::to_string(spec.input_dim));
  if (params.size() < static_cast<std::size_t>(2 * spec.num_layers()))
    throw DimensionError("MLP parameter set is missing layers");
  Matrix h = input;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const Matrix& w = params.value(2 * l);
    const Matrix& b = params.value(2 * l + 1);
    // Coefficient-wise product: every column goes through identical arithmetic,
    // so a sample does not depend on its position in the batch.
    Matrix next = w.lazyProduct(h);
    next.colwise() += b.col(0);
    if (l < spec.depth) apply_activation(next, spec.activation);
    h = std::move(next);
  }
  return h;
}

Vector mlp_forward(const ParamSet& params, const MlpSpec& spec, const Vector& input) {
  return mlp_forward(params, spec, Matrix(input)).col(0);
}

AdamState adam_init(const ParamSet& params, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  s.lr = lr;
  return s;
}

void adam_step(AdamState& opt, ParamSet& params, const ParamSet& grads) {
  if (!grads.same_shape(params) || !opt.m.same_shape(params))
    throw DimensionError("Adam: gradient/moment shapes do not match parameters");
  if (!grads.all_finite())
    throw NonFiniteError("optimizer", -1, "Adam: non-finite gradient rejected");

  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = opt.m.value(i);
    auto& v = opt.v.value(i);
    const Matrix& g = grads.value(i);
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseAbs2();
    auto& p = params.value(i);
    p.array() -= opt.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.eps);
  }
}

void polyak_update(ParamSet& target, const ParamSet& online, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0))
    throw ConfigError("Polyak coefficient must lie in [0, 1], got " + std::to_string(rho));
  if (!target.same_shape(online)) throw DimensionError("Polyak: target/online shapes differ");
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto& t = target.value(i);
    t = rho * t + (1.0 - rho) * online.value(i);
  }
}

ParamSet finite_difference_gradient(const std::function<double(const ParamSet&)>& loss,
                                    const ParamSet& at, double step) {
  ParamSet probe = at;
  ParamSet grad = at.zeros_like();
  for (std::size_t a = 0; a < probe.size(); ++a) {
    auto& p = probe.value(a);
    auto& g = grad.value(a);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double saved = p(k);
      p(k) = saved + step;
      const double up = loss(probe);
      p(k) = saved - step;
      const double down = loss(probe);
      p(k) = saved;
      g(k) = (up - down) / (2.0 * step);
    }
  }
  return grad;
}

double max_relative_error(const ParamSet& a, const ParamSet& b, double floor) {
  if (!a.same_shape(b)) throw DimensionError("gradient shapes differ");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Matrix& x = a.value(i);
    const Matrix& y = b.value(i);
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      const double denom = std::max({std::abs(x(k)), std::abs(y(k)), floor});
      worst = std::max(worst, std::abs(x(k) - y(k)) / denom);
    }
  }
  return worst;
}

}  // namespace dql
