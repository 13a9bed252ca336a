#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "relreason/tensor.hpp"

namespace relreason {

enum class OpKind {
  kMatmul,
  kLinear,
  kConv2d,
  kConv2dStrided,
  kBatchNorm,
  kBatchNormSpatial,
  kBatchNormEval,
  kRelu,
  kLeakyRelu,
  kSigmoid,
  kAvgPool,
  kAdaptiveAvgPool,
  kAdd,
  kSub,
  kMul,
  kMaximum,
  kMean,
  kConcat,
  kSliceCols,
  kGatherRows,
  kRowwiseDot,
  kSoftmaxCrossEntropy,
  kLog,
  kFocalBce,
};

std::string_view op_name(OpKind op);
std::optional<OpKind> parse_op(std::string_view name);
std::span<const OpKind> all_ops();
/// Shapes used when grad_check is called without explicit shapes.
std::vector<Shape> default_shapes(OpKind op);

struct GradCheckOptions {
  double step = 3e-4;
  /// When nonzero, at most this many randomly chosen entries per input.
  std::size_t max_entries_per_input = 0;
  /// Points where a kinked op sits closer than this to its kink are resampled.
  double kink_margin = 1e-4;
  int max_resamples = 50;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  int resamples = 0;
};

using LossFn = std::function<Tensor<double>(std::span<const Tensor<double>>)>;
using InputSampler = std::function<std::vector<Tensor<double>>(std::mt19937_64&)>;

/// Compares reverse-mode gradients of `loss` against 64-bit five-point
/// central differences for every input that requires grad. Error per entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Inputs are
/// redrawn from `sample` when a kinked op lands within kink_margin of its
/// kink. A stencil that flips a kink side is retried with the step quartered,
/// up to three times, before the whole sample is redrawn.
GradCheckReport grad_check_function(const LossFn& loss, const InputSampler& sample, std::uint64_t seed,
                                    const GradCheckOptions& options = {});

/// Checks one catalogue op under a random linear projection of its output.
double grad_check(OpKind op, const std::vector<Shape>& shapes, std::uint64_t seed,
                  const GradCheckOptions& options = {});
double grad_check(OpKind op, std::uint64_t seed);

/// Whole-model check: Conv-4 backbone on 8x8 inputs (2 instances x 2 views)
/// -> relation head (concatenation) -> focal loss over the resulting 4 pairs.
/// Every backbone and head parameter tensor is checked, 256 random entries
/// each unless options say otherwise. For gamma > 0 the numeric
/// side holds the focal weights at their values at the sampled point, which
/// is the gradient the loss defines.
inline constexpr std::size_t kEndToEndEntries = 256;
GradCheckReport end_to_end_grad_check(std::uint64_t seed, double gamma = 2.0,
                                      const GradCheckOptions& options = {.max_entries_per_input = kEndToEndEntries});

}  // namespace relreason
