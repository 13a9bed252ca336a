#include "relreason/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include "relreason/backbone.hpp"
#include "relreason/ops.hpp"
#include "relreason/relational.hpp"

namespace relreason {

namespace {

using T = Tensor<double>;

struct OpEntry {
  OpKind kind;
  std::string_view name;
};

constexpr std::array kOps = {
    OpEntry{OpKind::kMatmul, "matmul"},
    OpEntry{OpKind::kLinear, "linear"},
    OpEntry{OpKind::kConv2d, "conv2d"},
    OpEntry{OpKind::kConv2dStrided, "conv2d_strided"},
    OpEntry{OpKind::kBatchNorm, "batchnorm"},
    OpEntry{OpKind::kBatchNormSpatial, "batchnorm_spatial"},
    OpEntry{OpKind::kBatchNormEval, "batchnorm_eval"},
    OpEntry{OpKind::kRelu, "relu"},
    OpEntry{OpKind::kLeakyRelu, "leaky_relu"},
    OpEntry{OpKind::kSigmoid, "sigmoid"},
    OpEntry{OpKind::kAvgPool, "avg_pool"},
    OpEntry{OpKind::kAdaptiveAvgPool, "adaptive_avg_pool"},
    OpEntry{OpKind::kAdd, "add"},
    OpEntry{OpKind::kSub, "sub"},
    OpEntry{OpKind::kMul, "mul"},
    OpEntry{OpKind::kMaximum, "maximum"},
    OpEntry{OpKind::kMean, "mean"},
    OpEntry{OpKind::kConcat, "concat"},
    OpEntry{OpKind::kSliceCols, "slice_cols"},
    OpEntry{OpKind::kGatherRows, "gather_rows"},
    OpEntry{OpKind::kRowwiseDot, "rowwise_dot"},
    OpEntry{OpKind::kSoftmaxCrossEntropy, "softmax_cross_entropy"},
    OpEntry{OpKind::kLog, "log"},
    OpEntry{OpKind::kFocalBce, "focal_bce"},
};

constexpr std::array kAllKinds = [] {
  std::array<OpKind, kOps.size()> kinds{};
  for (std::size_t i = 0; i < kOps.size(); ++i) kinds[i] = kOps[i].kind;
  return kinds;
}();

T random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi, bool grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = dist(rng);
  T t(shape, std::move(values));
  if (grad) t.set_requires_grad();
  return t;
}

std::size_t input_count(OpKind op) {
  switch (op) {
    case OpKind::kMatmul:
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kMaximum:
    case OpKind::kConcat:
    case OpKind::kRowwiseDot:
      return 2;
    case OpKind::kLinear:
    case OpKind::kConv2d:
    case OpKind::kConv2dStrided:
    case OpKind::kBatchNorm:
    case OpKind::kBatchNormSpatial:
    case OpKind::kBatchNormEval:
      return 3;
    default:
      return 1;
  }
}

// Runs the op on the differentiable inputs; `aux` holds non-differentiable
// state (batch-norm running buffers).
T apply(OpKind op, std::span<const T> in, std::vector<T>& aux) {
  switch (op) {
    case OpKind::kMatmul: return matmul(in[0], in[1]);
    case OpKind::kLinear: return linear(in[0], in[1], in[2]);
    case OpKind::kConv2d: return conv2d(in[0], in[1], in[2], {.stride = 1, .padding = 1});
    case OpKind::kConv2dStrided: return conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 0});
    case OpKind::kBatchNorm:
    case OpKind::kBatchNormSpatial: return batch_norm(in[0], in[1], in[2], aux[0], aux[1], {.training = true});
    case OpKind::kBatchNormEval: return batch_norm(in[0], in[1], in[2], aux[0], aux[1], {.training = false});
    case OpKind::kRelu: return relu(in[0]);
    case OpKind::kLeakyRelu: return leaky_relu(in[0]);
    case OpKind::kSigmoid: return sigmoid(in[0]);
    case OpKind::kAvgPool: return avg_pool2d(in[0], 2, 2);
    case OpKind::kAdaptiveAvgPool: return adaptive_avg_pool(in[0]);
    case OpKind::kAdd: return add(in[0], in[1]);
    case OpKind::kSub: return sub(in[0], in[1]);
    case OpKind::kMul: return mul(in[0], in[1]);
    case OpKind::kMaximum: return maximum(in[0], in[1]);
    case OpKind::kMean: return mean(in[0]);
    case OpKind::kConcat: return concat(std::vector<T>{in[0], in[1]});
    case OpKind::kSliceCols: return slice_cols(in[0], 1, in[0].dim(1) - 1);
    case OpKind::kGatherRows: {
      const std::size_t n = in[0].dim(0);
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < n + 2; ++i) rows.push_back((3 * i + 1) % n);
      return gather_rows(in[0], std::span<const std::size_t>(rows));
    }
    case OpKind::kRowwiseDot: return rowwise_dot(in[0], in[1]);
    case OpKind::kSoftmaxCrossEntropy: {
      std::vector<int> labels(in[0].dim(0));
      for (std::size_t r = 0; r < labels.size(); ++r) labels[r] = int(r % in[0].dim(1));
      return softmax_cross_entropy(in[0], std::span<const int>(labels));
    }
    case OpKind::kLog: return log(in[0]);
    case OpKind::kFocalBce:
      // aux: targets, focal weights frozen at the sampled point.
      return weighted_bce<double>(in[0], aux[0].data(), aux[1].data());
  }
  throw std::logic_error("apply: unknown op");
}

constexpr int kStepShrinks = 3;

}  // namespace

std::string_view op_name(OpKind op) {
  for (const auto& e : kOps)
    if (e.kind == op) return e.name;
  return "unknown";
}

std::optional<OpKind> parse_op(std::string_view name) {
  for (const auto& e : kOps)
    if (e.name == name) return e.kind;
  return std::nullopt;
}

std::span<const OpKind> all_ops() { return kAllKinds; }

std::vector<Shape> default_shapes(OpKind op) {
  switch (op) {
    case OpKind::kMatmul: return {{3, 5}, {5, 2}};
    case OpKind::kLinear: return {{4, 6}, {3, 6}, {3}};
    case OpKind::kConv2d: return {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}};
    case OpKind::kConv2dStrided: return {{2, 2, 7, 7}, {3, 2, 3, 3}, {3}};
    case OpKind::kBatchNorm:
    case OpKind::kBatchNormEval: return {{8, 4}, {4}, {4}};
    case OpKind::kBatchNormSpatial: return {{3, 2, 4, 4}, {2}, {2}};
    case OpKind::kAvgPool:
    case OpKind::kAdaptiveAvgPool: return {{2, 3, 4, 6}};
    case OpKind::kConcat: return {{3, 2}, {3, 4}};
    case OpKind::kSliceCols: return {{3, 5}};
    case OpKind::kGatherRows: return {{4, 3}};
    case OpKind::kRowwiseDot: return {{5, 4}, {5, 4}};
    case OpKind::kSoftmaxCrossEntropy: return {{6, 4}};
    case OpKind::kFocalBce: return {{8, 1}};
    default: break;
  }
  const std::size_t n = input_count(op);
  return std::vector<Shape>(n, Shape{4, 4});
}

GradCheckReport grad_check_function(const LossFn& loss, const InputSampler& sample, std::uint64_t seed,
                                    const GradCheckOptions& options) {
  std::mt19937_64 rng(seed);
  const double h = options.step;
  for (int attempt = 0; attempt <= options.max_resamples; ++attempt) {
    std::vector<T> inputs = sample(rng);
    // Samplers may hand back the same tensors on every draw.
    for (auto& t : inputs) t.zero_grad();
    KinkProbe base;
    {
      KinkProbe::Scope scope(base);
      T value = loss(inputs);
      value.backward();
    }
    if (base.count > 0 && base.min_margin < options.kink_margin) continue;

    std::vector<std::vector<double>> analytic(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!inputs[k].requires_grad()) continue;
      if (inputs[k].has_grad()) {
        analytic[k].assign(inputs[k].grad().begin(), inputs[k].grad().end());
      } else {
        analytic[k].assign(inputs[k].size(), 0.0);
      }
      inputs[k].zero_grad();
    }

    const auto evaluate = [&](bool& flipped) {
      NoGradGuard no_grad;
      KinkProbe probe;
      KinkProbe::Scope scope(probe);
      const double v = loss(inputs).item();
      flipped = flipped || probe.signature != base.signature;
      return v;
    };

    GradCheckReport report;
    report.resamples = attempt;
    bool flipped = false;
    for (std::size_t k = 0; k < inputs.size() && !flipped; ++k) {
      if (!inputs[k].requires_grad()) continue;
      auto values = inputs[k].data();
      std::vector<std::size_t> entries(values.size());
      for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
      if (options.max_entries_per_input > 0 && entries.size() > options.max_entries_per_input) {
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(options.max_entries_per_input);
      }
      for (std::size_t e = 0; e < entries.size() && !flipped; ++e) {
        const std::size_t i = entries[e];
        const double original = values[i];
        const auto at = [&](double offset) {
          values[i] = original + offset;
          return evaluate(flipped);
        };
        // Five-point central stencil, truncation error O(h^4). A stencil that
        // crosses a kink is retried with a shorter step before giving up on
        // the sample.
        double numeric = 0.0;
        double step = h;
        for (int shrink = 0; shrink <= kStepShrinks; ++shrink, step *= 0.25) {
          flipped = false;
          numeric = (at(-2 * step) - 8 * at(-step) + 8 * at(step) - at(2 * step)) / (12 * step);
          if (!flipped) break;
        }
        values[i] = original;
        const double a = analytic[k][i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        report.max_relative_error = std::max(report.max_relative_error, std::abs(a - numeric) / denom);
        ++report.entries_checked;
      }
    }
    if (flipped) continue;
    return report;
  }
  throw std::runtime_error("grad_check: no kink-free sample found after " +
                           std::to_string(options.max_resamples) + " resamples");
}

double grad_check(OpKind op, const std::vector<Shape>& shapes, std::uint64_t seed, const GradCheckOptions& options) {
  if (shapes.size() != input_count(op)) {
    throw ShapeError("grad_check: op " + std::string(op_name(op)) + " takes " + std::to_string(input_count(op)) +
                     " shapes, got " + std::to_string(shapes.size()));
  }
  const bool is_batch_norm =
      op == OpKind::kBatchNorm || op == OpKind::kBatchNormSpatial || op == OpKind::kBatchNormEval;
  auto aux = std::make_shared<std::vector<T>>();
  auto projection = std::make_shared<T>();

  InputSampler sampler = [=](std::mt19937_64& rng) {
    std::vector<T> inputs;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      double lo = -1.0, hi = 1.0;
      if (op == OpKind::kLog) lo = 0.5, hi = 2.0;
      if (op == OpKind::kFocalBce) lo = 0.05, hi = 0.95;
      if (is_batch_norm && k == 1) lo = 0.5, hi = 1.5;
      inputs.push_back(random_tensor(shapes[k], rng, lo, hi, true));
    }
    aux->clear();
    if (is_batch_norm) {
      const Shape channels{shapes[1]};
      aux->push_back(random_tensor(channels, rng, -0.5, 0.5, false));
      aux->push_back(random_tensor(channels, rng, 0.5, 2.0, false));
    }
    if (op == OpKind::kFocalBce) {
      T targets(shapes[0]);
      for (std::size_t p = 0; p < targets.size(); ++p) targets.data()[p] = double(p % 2);
      const auto w = focal_weights<double>(std::as_const(inputs[0]).data(), std::as_const(targets).data(), 2.0);
      aux->push_back(targets);
      aux->push_back(T(shapes[0], w));
    }
    NoGradGuard no_grad;
    const T out = apply(op, inputs, *aux);
    *projection = random_tensor(out.shape(), rng, -1.0, 1.0, false);
    return inputs;
  };
  LossFn loss = [=](std::span<const T> inputs) {
    return sum(mul(apply(op, inputs, *aux), *projection));
  };
  return grad_check_function(loss, sampler, seed, options).max_relative_error;
}

double grad_check(OpKind op, std::uint64_t seed) { return grad_check(op, default_shapes(op), seed); }

GradCheckReport end_to_end_grad_check(std::uint64_t seed, double gamma, const GradCheckOptions& options) {
  constexpr std::size_t kInstances = 2, kViews = 2, kSize = 8;
  struct Model {
    Conv4Backbone<double> backbone;
    RelationHead<double> head{kRepresentationWidth, AggregationMode::kCat};
    T images;
    PairIndex index;
    std::vector<double> weights;
  };
  auto model = std::make_shared<Model>();

  const auto forward = [model] {
    const T z = model->backbone(model->images, Mode::kTrain);
    return model->head.score(z, model->index, Mode::kTrain);
  };

  InputSampler sampler = [model, forward, gamma](std::mt19937_64& rng) {
    const std::uint64_t draw = rng();
    model->backbone.init_weights(draw);
    model->head.init(draw);
    model->images = random_tensor({kInstances * kViews, 3, kSize, kSize}, rng, 0.0, 1.0, false);
    Rng pair_rng(draw);
    model->index = make_pair_index(kInstances, kViews, pair_rng);
    std::vector<double> targets(model->index.targets.begin(), model->index.targets.end());
    {
      NoGradGuard no_grad;
      const T y = forward();
      model->weights = focal_weights<double>(y.data(), targets, gamma);
    }
    std::vector<T> params;
    for (auto& p : model->backbone.parameters()) params.push_back(p.tensor);
    for (auto& p : model->head.parameters()) params.push_back(p.tensor);
    return params;
  };
  LossFn loss = [model, forward](std::span<const T>) {
    std::vector<double> targets(model->index.targets.begin(), model->index.targets.end());
    return weighted_bce<double>(forward(), targets, model->weights);
  };
  return grad_check_function(loss, sampler, seed, options);
}

}  // namespace relreason
