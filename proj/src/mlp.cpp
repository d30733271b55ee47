#include "subflow/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "subflow/errors.hpp"

namespace subflow {

Activation parse_activation(const std::string& name) {
  if (name == "leaky_relu") {
    return Activation::kLeakyRelu;
  }
  if (name == "tanh") {
    return Activation::kTanh;
  }
  if (name == "identity") {
    return Activation::kIdentity;
  }
  throw ConfigError("policy.activation", "unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kLeakyRelu:
      return "leaky_relu";
    case Activation::kTanh:
      return "tanh";
    case Activation::kIdentity:
      return "identity";
  }
  return "unknown";
}

void GradAccumulator::add(const GradAccumulator& other) {
  if (other.grads.size() != grads.size()) {
    throw ContractError("GradAccumulator::add: size mismatch");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    grads[i] += other.grads[i];
  }
}

bool GradAccumulator::finite() const {
  return std::all_of(grads.begin(), grads.end(), [](double g) { return std::isfinite(g); });
}

double GradAccumulator::norm() const {
  return std::sqrt(std::inner_product(grads.begin(), grads.end(), grads.begin(), 0.0));
}

Approximator::Approximator(std::vector<int> widths, Activation activation, double leaky_slope)
    : widths_(std::move(widths)), activation_(activation), slope_(leaky_slope) {
  if (widths_.size() < 2) {
    throw ContractError("Approximator: need at least input and output widths");
  }
  for (int w : widths_) {
    if (w < 1) {
      throw ContractError("Approximator: layer widths must be positive");
    }
  }
  offsets_.resize(widths_.size());
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    offsets_[l] = off;
    off += static_cast<std::size_t>(widths_[l] + 1) * static_cast<std::size_t>(widths_[l + 1]);
  }
  offsets_.back() = off;
  params_.assign(off, 0.0);
}

std::size_t Approximator::parameter_count(std::span<const int> widths) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    n += static_cast<std::size_t>(widths[l] + 1) * static_cast<std::size_t>(widths[l + 1]);
  }
  return n;
}

void Approximator::initialize(std::mt19937_64& gen) {
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const int in = widths_[l];
    const int out = widths_[l + 1];
    const double limit = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    double* w = params_.data() + offsets_[l];
    for (int k = 0; k < in * out; ++k) {
      w[k] = u(gen);
    }
    std::fill(w + in * out, w + in * out + out, 0.0);
  }
}

void Approximator::zero_output_layer() {
  const std::size_t l = widths_.size() - 2;
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(offsets_[l]), params_.end(), 0.0);
}

Matrix Approximator::activate(const Matrix& z) const {
  switch (activation_) {
    case Activation::kLeakyRelu: {
      const double s = slope_;
      return z.unaryExpr([s](double v) { return v > 0.0 ? v : s * v; });
    }
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kIdentity:
      return z;
  }
  return z;
}

Matrix Approximator::activate_grad(const Matrix& z) const {
  switch (activation_) {
    case Activation::kLeakyRelu: {
      const double s = slope_;
      return z.unaryExpr([s](double v) { return v > 0.0 ? 1.0 : s; });
    }
    case Activation::kTanh: {
      Matrix t = z.array().tanh().matrix();
      return (1.0 - t.array().square()).matrix();
    }
    case Activation::kIdentity:
      return Matrix::Ones(z.rows(), z.cols());
  }
  return Matrix::Ones(z.rows(), z.cols());
}

Matrix Approximator::forward(const Matrix& x) const {
  Tape unused;
  return forward(x, unused);
}

Matrix Approximator::forward(const Matrix& x, Tape& tape) const {
  if (x.cols() != input_width()) {
    std::ostringstream msg;
    msg << "Approximator::forward: input width " << x.cols() << " != " << input_width();
    throw ContractError(msg.str());
  }
  const std::size_t layers = widths_.size() - 1;
  tape.inputs.assign(1, x);
  tape.pre.clear();
  Matrix h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = widths_[l];
    const int out = widths_[l + 1];
    WeightMap w(params_.data() + offsets_[l], out, in);
    BiasMap b(params_.data() + offsets_[l] + static_cast<std::size_t>(in * out), out);
    Matrix z = h * w.transpose();
    z.rowwise() += b;
    if (l + 1 == layers) {
      return z;
    }
    tape.pre.push_back(z);
    h = activate(z);
    tape.inputs.push_back(h);
  }
  return h;
}

Matrix Approximator::backward(const Tape& tape, const Matrix& upstream, GradAccumulator& acc) const {
  const std::size_t layers = widths_.size() - 1;
  if (tape.inputs.size() != layers || upstream.cols() != output_width() ||
      upstream.rows() != tape.inputs.front().rows()) {
    throw ContractError("Approximator::backward: upstream/tape shape mismatch");
  }
  if (acc.grads.size() != params_.size()) {
    throw ContractError("Approximator::backward: accumulator size mismatch");
  }
  Matrix delta = upstream;
  for (std::size_t li = layers; li-- > 0;) {
    const int in = widths_[li];
    const int out = widths_[li + 1];
    WeightMap w(params_.data() + offsets_[li], out, in);
    Eigen::Map<Matrix> gw(acc.grads.data() + offsets_[li], out, in);
    Eigen::Map<Eigen::RowVectorXd> gb(acc.grads.data() + offsets_[li] + static_cast<std::size_t>(in * out), out);
    Matrix step = delta.transpose() * tape.inputs[li];
    gw += step;
    const Eigen::RowVectorXd bias_step = delta.colwise().sum();
    gb += bias_step;
    Matrix dh = delta * w;
    if (li == 0) {
      return dh;
    }
    delta = dh.cwiseProduct(activate_grad(tape.pre[li - 1]));
  }
  return delta;
}

std::vector<double> Approximator::forward(std::span<const double> input) const {
  if (static_cast<int>(input.size()) != input_width()) {
    throw ContractError("Approximator::forward: input length mismatch");
  }
  Matrix x = Eigen::Map<const Matrix>(input.data(), 1, input_width());
  Matrix y = forward(x);
  return {y.data(), y.data() + y.size()};
}

std::vector<double> Approximator::backward(std::span<const double> input,
                                           std::span<const double> upstream,
                                           GradAccumulator& acc) const {
  if (static_cast<int>(input.size()) != input_width() ||
      static_cast<int>(upstream.size()) != output_width()) {
    throw ContractError("Approximator::backward: dimension mismatch");
  }
  Matrix x = Eigen::Map<const Matrix>(input.data(), 1, input_width());
  Tape tape;
  forward(x, tape);
  Matrix u = Eigen::Map<const Matrix>(upstream.data(), 1, output_width());
  Matrix dx = backward(tape, u, acc);
  return {dx.data(), dx.data() + dx.size()};
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ContractError("adam_step: parameter, gradient and moment lengths differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::ostringstream msg;
      msg << "adam_step: non-finite gradient " << grads[i] << " at index " << i;
      throw NumericalError(msg.str());
    }
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i] * grads[i];
    params[i] -= state.learning_rate * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
  }
}

}  // namespace subflow
