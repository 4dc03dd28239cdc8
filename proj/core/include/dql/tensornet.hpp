#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "dql/rng.hpp"

namespace dql {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Ordered, named collection of fixed-shape parameter arrays.
///
/// Arrays can be added but never reshaped; mutable element access is for
/// in-place updates only.
class ParamSet {
 public:
  ParamSet() = default;

  void add(std::string name, Matrix value);

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Matrix& value(std::size_t i) const { return values_.at(i); }
  Matrix& value(std::size_t i) { return values_.at(i); }

  const Matrix& at(std::string_view name) const;
  Matrix& at(std::string_view name);
  std::ptrdiff_t find(std::string_view name) const noexcept;

  std::size_t num_scalars() const noexcept;
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

  ParamSet zeros_like() const;
  bool same_shape(const ParamSet& other) const noexcept;
  bool all_finite() const noexcept;

  // Largest absolute element-wise difference; shapes must match.
  double max_abs_diff(const ParamSet& other) const;

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

enum class Activation { Mish, Identity };

/// Dense network shape: `depth` hidden layers of width `hidden_dim`, each a
/// linear map followed by `activation`, then a linear output layer.
struct MlpSpec {
  int input_dim = 1;
  int hidden_dim = 256;
  int depth = 3;
  int output_dim = 1;
  Activation activation = Activation::Mish;

  int num_layers() const noexcept { return depth + 1; }
  void validate() const;
};

double mish(double x) noexcept;
double mish_derivative(double x) noexcept;
// Element-wise versions.
Matrix mish(const Matrix& x);
Matrix mish_derivative(const Matrix& x);
double softplus(double x) noexcept;

/// Interleaved sinusoidal embedding: entry 2k = sin(i / 10000^(2k/dim)),
/// entry 2k+1 = cos(i / 10000^(2k/dim)).
Vector time_embed(int step, int dim);

// Parameters are named "w0", "b0", ..., "w{depth}", "b{depth}"; weights are
// (out x in). Entries drawn uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
ParamSet mlp_init(const MlpSpec& spec, Rng& rng);
ParamSet mlp_zeros(const MlpSpec& spec);

Vector mlp_forward(const ParamSet& params, const MlpSpec& spec, const Vector& input);
// Column-batched forward pass: input is (input_dim x batch).
Matrix mlp_forward(const ParamSet& params, const MlpSpec& spec, const Matrix& input);

struct AdamState {
  ParamSet m;
  ParamSet v;
  long step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState adam_init(const ParamSet& params, double lr);

/// Bias-corrected Adam update in place. Non-finite gradients are rejected
/// with NonFiniteError before any state is touched.
void adam_step(AdamState& opt, ParamSet& params, const ParamSet& grads);

/// target <- rho * target + (1 - rho) * online.
void polyak_update(ParamSet& target, const ParamSet& online, double rho);

/// Central finite differences of a scalar function of all parameters.
ParamSet finite_difference_gradient(const std::function<double(const ParamSet&)>& loss,
                                    const ParamSet& at, double step = 1e-5);

/// Largest per-entry |a - b| / max(|a|, |b|, floor).
double max_relative_error(const ParamSet& a, const ParamSet& b, double floor = 1e-6);

}  // namespace dql
