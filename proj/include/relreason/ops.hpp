#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "relreason/tensor.hpp"

namespace relreason {

inline constexpr double kLeakyReluSlope = 0.01;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

// Elementwise.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& x, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& x, S offset);
template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(kLeakyReluSlope));
template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);
template <typename S> Tensor<S> log(const Tensor<S>& x);

// Reductions to a 1-element tensor.
template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x);

// Shape manipulation.
template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
/// Concatenates 2-D tensors along the feature (column) axis.
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts);
/// Columns [begin, end) of a 2-D tensor.
template <typename S> Tensor<S> slice_cols(const Tensor<S>& x, std::size_t begin, std::size_t end);
/// Selects entries along axis 0; indices may repeat.
template <typename S> Tensor<S> gather_rows(const Tensor<S>& x, std::span<const std::size_t> rows);

// Dense layers.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
/// x (N x in) times weight (out x in) transposed, plus bias (out).
template <typename S> Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias);
/// <a_n, b_n> for each row n; returns N x 1.
template <typename S> Tensor<S> rowwise_dot(const Tensor<S>& a, const Tensor<S>& b);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

/// x: N x C x H x W, weight: O x C x kh x kw, bias: O.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, Conv2dOptions options = {});

template <typename S> Tensor<S> avg_pool2d(const Tensor<S>& x, std::size_t kernel, std::size_t stride);
/// Averages each map to a single value: N x C x H x W -> N x C x 1 x 1.
template <typename S> Tensor<S> adaptive_avg_pool(const Tensor<S>& x);

struct BatchNormOptions {
  bool training = true;
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEps;
};

/// Per-channel normalization over batch and spatial axes for N x C or
/// N x C x H x W input. Training mode normalizes with batch statistics and
/// updates the running buffers in place (unbiased variance); inference mode
/// uses the running buffers and mutates nothing.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, BatchNormOptions options = {});

/// Mean over rows of -log softmax(logits)[label].
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> labels);

/// Row-wise argmax of a 2-D tensor.
template <typename S> std::vector<int> argmax_rows(const Tensor<S>& x);

/// Records how close kinked ops (relu, leaky_relu, maximum) were evaluated to
/// their kink, plus a signature of which side every element fell on. Only
/// active while a KinkProbe::Scope is alive on the current thread.
struct KinkProbe {
  double min_margin = 0.0;
  std::uint64_t signature = 0;
  std::size_t count = 0;

  class Scope {
   public:
    explicit Scope(KinkProbe& probe);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    KinkProbe* previous_;
  };

  void record(double margin, bool positive_side);
  static KinkProbe* active();
};

}  // namespace relreason
