#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "relreason/image.hpp"
#include "relreason/rng.hpp"

namespace relreason {

struct JitterStrength {
  double brightness = 0.8;
  double contrast = 0.8;
  double saturation = 0.8;
  double hue = 0.2;
};

/// Stochastic view distribution: flip, crop-resize, grayscale, color jitter.
struct AugmentPolicy {
  double flip_prob = 0.5;
  std::array<double, 2> crop_scale{0.08, 1.0};
  std::array<double, 2> crop_aspect{3.0 / 4.0, 4.0 / 3.0};
  double grayscale_prob = 0.2;
  double jitter_prob = 0.8;
  JitterStrength jitter_max;

  /// Every transform degenerates to the identity.
  static AugmentPolicy identity();
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Crop rectangle in source pixel units (continuous).
struct CropBox {
  double x = 0, y = 0, width = 0, height = 0;
};

/// What a single sample_view call actually did.
struct ViewRecord {
  bool flipped = false;
  CropBox crop;
  double area_fraction = 1.0;
  double aspect = 1.0;
  bool fallback_crop = false;
  bool grayscale = false;
  bool jittered = false;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0, hue_shift = 0.0;
};

inline constexpr int kCropAttempts = 10;

/// One augmented view of an H x W x 3 image, same size as the input. Order:
/// horizontal flip, crop-resize (always), grayscale, color jitter.
Image sample_view(const Image& image, const AugmentPolicy& policy, Rng& rng, ViewRecord* record = nullptr);

/// Samples a crop with area fraction in crop_scale and aspect in
/// crop_aspect, retrying up to kCropAttempts times before falling back to
/// the largest centered crop with an admissible aspect.
CropBox sample_crop(std::size_t height, std::size_t width, const AugmentPolicy& policy, Rng& rng,
                    bool* fallback = nullptr);

/// Bilinear resize of `box` to out_h x out_w, half-pixel centers, edge clamp.
Image crop_resize(const Image& image, const CropBox& box, std::size_t out_h, std::size_t out_w);

void to_grayscale(Image& image);
void adjust_brightness(Image& image, double factor);
void adjust_contrast(Image& image, double factor);
void adjust_saturation(Image& image, double factor);
/// Rotates hue by `shift` turns in HSV space.
void adjust_hue(Image& image, double shift);

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

/// K independent view batches of `batch`. View k of image m draws from its
/// own stream seeded by (one draw from rng, m, k), so results do not depend
/// on evaluation order.
std::vector<std::vector<Image>> augment_batch(std::span<const Image> batch, const AugmentPolicy& policy,
                                              std::size_t views, Rng& rng);

}  // namespace relreason
