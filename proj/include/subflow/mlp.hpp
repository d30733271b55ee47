#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace subflow {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint32_t { kLeakyRelu = 0, kTanh = 1, kIdentity = 2 };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// Gradient buffer aligned with an Approximator's flat parameter vector.
struct GradAccumulator {
  std::vector<double> grads;

  explicit GradAccumulator(std::size_t n = 0) : grads(n, 0.0) {}
  void zero() { std::fill(grads.begin(), grads.end(), 0.0); }
  void add(const GradAccumulator& other);
  bool finite() const;
  double norm() const;
};

/// Activations kept from a batched forward pass for the matching backward pass.
struct Tape {
  std::vector<Matrix> inputs;  // input to each layer, inputs[0] = x
  std::vector<Matrix> pre;     // pre-activation of each hidden layer
};

/// Multilayer perceptron. Hidden layers use `activation`, the output layer is
/// linear. Parameters are stored flat, layer by layer: a row-major weight
/// block (out x in) followed by the bias (out).
class Approximator {
 public:
  Approximator() = default;
  Approximator(std::vector<int> widths, Activation activation = Activation::kLeakyRelu,
               double leaky_slope = 0.01);

  static std::size_t parameter_count(std::span<const int> widths);

  const std::vector<int>& widths() const { return widths_; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  Activation activation() const { return activation_; }
  double leaky_slope() const { return slope_; }

  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  std::size_t size() const { return params_.size(); }

  /// Glorot-uniform weights, zero biases.
  void initialize(std::mt19937_64& gen);
  void zero_output_layer();

  /// Rows of `x` are samples.
  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, Tape& tape) const;
  /// Adds d(sum_rows upstream . output)/d params into `acc`; returns the
  /// gradient with respect to the input rows.
  Matrix backward(const Tape& tape, const Matrix& upstream, GradAccumulator& acc) const;

  std::vector<double> forward(std::span<const double> input) const;
  std::vector<double> backward(std::span<const double> input, std::span<const double> upstream,
                               GradAccumulator& acc) const;

 private:
  using WeightMap = Eigen::Map<const Matrix>;
  using BiasMap = Eigen::Map<const Eigen::RowVectorXd>;
  std::size_t layer_offset(std::size_t layer) const { return offsets_[layer]; }
  Matrix activate(const Matrix& z) const;
  Matrix activate_grad(const Matrix& z) const;

  std::vector<int> widths_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
  Activation activation_ = Activation::kLeakyRelu;
  double slope_ = 0.01;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  AdamState(std::size_t n, double lr) : first_moment(n, 0.0), second_moment(n, 0.0), learning_rate(lr) {}
};

/// One bias-corrected Adam update. Throws NumericalError on non-finite
/// gradients before touching params or state.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

}  // namespace subflow
