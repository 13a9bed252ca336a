#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "relreason/ops.hpp"
#include "relreason/rng.hpp"
#include "relreason/tensor.hpp"

namespace relreason {

enum class Mode { kTrain, kEval };

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
using NamedTensors = std::vector<NamedTensor<S>>;

template <typename S>
std::size_t count_elements(const NamedTensors<S>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.tensor.size();
  return n;
}

template <typename S>
void fill_uniform(Tensor<S>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<S>(dist(rng));
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename S>
void init_fan_in_fan_out(Tensor<S>& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  fill_uniform(t, std::sqrt(6.0 / double(fan_in + fan_out)), rng);
}

/// Uniform in +-1/sqrt(fan_in).
template <typename S>
void init_fan_in(Tensor<S>& t, std::size_t fan_in, Rng& rng) {
  fill_uniform(t, 1.0 / std::sqrt(double(fan_in)), rng);
}

template <typename S>
Tensor<S> parameter(Shape shape, S fill = S(0)) {
  Tensor<S> t(std::move(shape), fill);
  t.set_requires_grad();
  return t;
}

template <typename S>
struct Linear {
  Tensor<S> weight;  // out x in
  Tensor<S> bias;

  Linear(std::size_t in, std::size_t out) : weight(parameter<S>({out, in})), bias(parameter<S>({out})) {}

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, NamedTensors<S>& params) const {
    params.push_back({prefix + ".weight", weight});
    params.push_back({prefix + ".bias", bias});
  }
};

template <typename S>
struct Conv2d {
  Tensor<S> weight;  // out x in x k x k
  Tensor<S> bias;
  Conv2dOptions options;

  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opts)
      : weight(parameter<S>({out, in, kernel, kernel})), bias(parameter<S>({out})), options(opts) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, options); }

  void collect(const std::string& prefix, NamedTensors<S>& params) const {
    params.push_back({prefix + ".weight", weight});
    params.push_back({prefix + ".bias", bias});
  }
};

template <typename S>
struct BatchNorm {
  Tensor<S> gamma;
  Tensor<S> beta;
  Tensor<S> running_mean;
  Tensor<S> running_var;

  explicit BatchNorm(std::size_t channels)
      : gamma(parameter<S>({channels}, S(1))),
        beta(parameter<S>({channels})),
        running_mean(Shape{channels}),
        running_var(Shape{channels}, S(1)) {}

  Tensor<S> operator()(const Tensor<S>& x, Mode mode) {
    return batch_norm(x, gamma, beta, running_mean, running_var, {.training = mode == Mode::kTrain});
  }

  void reset() {
    for (auto& v : gamma.data()) v = S(1);
    for (auto& v : beta.data()) v = S(0);
    for (auto& v : running_mean.data()) v = S(0);
    for (auto& v : running_var.data()) v = S(1);
  }

  void collect(const std::string& prefix, NamedTensors<S>& params) const {
    params.push_back({prefix + ".weight", gamma});
    params.push_back({prefix + ".bias", beta});
  }
  void collect_buffers(const std::string& prefix, NamedTensors<S>& buffers) const {
    buffers.push_back({prefix + ".running_mean", running_mean});
    buffers.push_back({prefix + ".running_var", running_var});
  }
};

/// Linear -> batch-norm -> leaky-ReLU -> Linear. Shared by the relation head
/// and the encoder ablation.
template <typename S>
struct Mlp {
  Linear<S> hidden;
  BatchNorm<S> norm;
  Linear<S> output;

  Mlp(std::size_t in, std::size_t width, std::size_t out) : hidden(in, width), norm(width), output(width, out) {}

  Tensor<S> operator()(const Tensor<S>& x, Mode mode) { return output(leaky_relu(norm(hidden(x), mode))); }

  /// Fan-in uniform weights, zero biases, unit batch-norm scale.
  void init(Rng& rng) {
    init_fan_in(hidden.weight, hidden.in_features(), rng);
    init_fan_in(output.weight, output.in_features(), rng);
    for (auto& v : hidden.bias.data()) v = S(0);
    for (auto& v : output.bias.data()) v = S(0);
    norm.reset();
  }

  void collect(const std::string& prefix, NamedTensors<S>& params) const {
    hidden.collect(prefix + ".hidden", params);
    norm.collect(prefix + ".norm", params);
    output.collect(prefix + ".output", params);
  }
  void collect_buffers(const std::string& prefix, NamedTensors<S>& buffers) const {
    norm.collect_buffers(prefix + ".norm", buffers);
  }
};

/// Copies values of `from` into `to`, matching by position; shapes must agree.
template <typename To, typename From>
void copy_values(const NamedTensors<From>& from, NamedTensors<To>& to) {
  if (from.size() != to.size()) throw ShapeError("copy_values: tensor lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].tensor.shape() != to[i].tensor.shape()) {
      throw ShapeError("copy_values: " + from[i].name + " " + shape_str(from[i].tensor.shape()) + " vs " +
                       shape_str(to[i].tensor.shape()));
    }
    auto src = from[i].tensor.data();
    auto dst = to[i].tensor.data();
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<To>(src[k]);
  }
}

}  // namespace relreason
