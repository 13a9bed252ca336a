#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "relreason/layers.hpp"

namespace relreason {

inline constexpr std::size_t kRepresentationWidth = 64;
inline constexpr std::array<std::size_t, 4> kConv4Widths{8, 16, 32, 64};
/// Three 2x2 pools before the adaptive pool; smaller inputs would vanish.
inline constexpr std::size_t kMinInputSize = 8;

/// Conv-4 feature extractor. Blocks 1-3: conv3x3 (pad 1) -> batch-norm ->
/// ReLU -> 2x2 average pool. Block 4: the same conv/norm/ReLU followed by
/// adaptive average pooling to 1x1, giving a 64-wide representation.
template <typename S>
class Conv4Backbone {
 public:
  struct Block {
    Conv2d<S> conv;
    BatchNorm<S> norm;
  };

  Conv4Backbone() {
    std::size_t in = 3;
    for (std::size_t width : kConv4Widths) {
      blocks_.push_back({Conv2d<S>(in, width, 3, {.stride = 1, .padding = 1}), BatchNorm<S>(width)});
      in = width;
    }
  }

  /// x: N x 3 x H x W, values in [0, 1]. Returns N x 64.
  Tensor<S> operator()(const Tensor<S>& x, Mode mode) {
    if (x.rank() != 4) throw ShapeError("Conv4Backbone: expected N x C x H x W input, got " + shape_str(x.shape()));
    if (x.dim(1) != 3) {
      throw ShapeError("Conv4Backbone: expected 3 input channels, got " + std::to_string(x.dim(1)));
    }
    if (x.dim(2) < kMinInputSize || x.dim(3) < kMinInputSize) {
      throw ShapeError("Conv4Backbone: input " + shape_str(x.shape()) + " smaller than " +
                       std::to_string(kMinInputSize) + " px");
    }
    Tensor<S> h = x;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = relu(blocks_[b].norm(blocks_[b].conv(h), mode));
      h = b + 1 < blocks_.size() ? avg_pool2d(h, 2, 2) : adaptive_avg_pool(h);
    }
    return reshape(h, {x.dim(0), kRepresentationWidth});
  }

  /// Fan-in/fan-out uniform conv weights, zero conv biases, unit batch-norm
  /// scale and zero shift, fresh running statistics.
  void init_weights(std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xBACCB0E5ULL}));
    for (auto& block : blocks_) {
      const auto& w = block.conv.weight;
      const std::size_t field = w.dim(2) * w.dim(3);
      init_fan_in_fan_out(block.conv.weight, w.dim(1) * field, w.dim(0) * field, rng);
      for (auto& v : block.conv.bias.data()) v = S(0);
      block.norm.reset();
    }
  }

  NamedTensors<S> parameters() const {
    NamedTensors<S> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string prefix = "backbone.block" + std::to_string(b + 1);
      blocks_[b].conv.collect(prefix + ".conv", out);
      blocks_[b].norm.collect(prefix + ".norm", out);
    }
    return out;
  }

  /// Batch-norm running statistics.
  NamedTensors<S> buffers() const {
    NamedTensors<S> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].norm.collect_buffers("backbone.block" + std::to_string(b + 1) + ".norm", out);
    }
    return out;
  }

  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  std::vector<Block> blocks_;
};

/// Linear classifier on top of frozen representations.
template <typename S>
struct LinearProbe {
  Linear<S> layer;

  LinearProbe(std::size_t in, std::size_t classes) : layer(in, classes) {}

  std::size_t num_classes() const { return layer.out_features(); }
  Tensor<S> operator()(const Tensor<S>& features) const { return layer(features); }

  void init(Rng& rng) {
    init_fan_in_fan_out(layer.weight, layer.in_features(), layer.out_features(), rng);
    for (auto& v : layer.bias.data()) v = S(0);
  }

  NamedTensors<S> parameters(const std::string& prefix = "probe") const {
    NamedTensors<S> out;
    layer.collect(prefix, out);
    return out;
  }
};

}  // namespace relreason
