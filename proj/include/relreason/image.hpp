#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "relreason/tensor.hpp"

namespace relreason {

/// Floating-point image, channel-interleaved (H x W x C), values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

/// Packs equally sized images into an N x C x H x W tensor.
template <typename S>
Tensor<S> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const Image& first = images.front();
  const std::size_t h = first.height, w = first.width, c = first.channels;
  std::vector<S> data(images.size() * c * h * w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = images[n];
    if (img.height != h || img.width != w || img.channels != c) {
      throw ShapeError("images_to_tensor: image " + std::to_string(n) + " differs in size from image 0");
    }
    S* dst = data.data() + n * c * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) dst[(ch * h + y) * w + x] = static_cast<S>(img.at(y, x, ch));
  }
  return Tensor<S>(Shape{images.size(), c, h, w}, std::move(data));
}

}  // namespace relreason
