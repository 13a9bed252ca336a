#include "relreason/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace relreason {

namespace {

void require_rgb(const Image& image, const char* op) {
  if (image.channels != 3) {
    throw std::invalid_argument(std::string(op) + ": expected 3 channels, got " + std::to_string(image.channels));
  }
}

void clamp01(Image& image) {
  for (auto& v : image.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

float luma(const float* px) {
  return float(kLumaWeights[0] * px[0] + kLumaWeights[1] * px[1] + kLumaWeights[2] * px[2]);
}

// Blend toward a reference value per pixel: f * p + (1 - f) * ref.
template <typename Ref>
void blend(Image& image, double factor, Ref reference) {
  const float f = float(factor);
  for (std::size_t p = 0; p < image.height * image.width; ++p) {
    float* px = image.pixels.data() + p * 3;
    const float ref = reference(px);
    for (int c = 0; c < 3; ++c) px[c] = f * px[c] + (1.0f - f) * ref;
  }
  clamp01(image);
}

double jitter_factor(Rng& rng, double strength) { return uniform(rng, std::max(0.0, 1.0 - strength), 1.0 + strength); }

}  // namespace

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p;
  p.flip_prob = 0.0;
  p.crop_scale = {1.0, 1.0};
  p.crop_aspect = {1.0, 1.0};
  p.grayscale_prob = 0.0;
  p.jitter_prob = 0.0;
  return p;
}

void AugmentPolicy::validate() const {
  const auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
  };
  prob(flip_prob, "flip_prob");
  prob(grayscale_prob, "grayscale_prob");
  prob(jitter_prob, "jitter_prob");
  if (!(crop_scale[0] > 0.0 && crop_scale[0] <= crop_scale[1] && crop_scale[1] <= 1.0)) {
    throw std::invalid_argument("crop_scale must satisfy 0 < lo <= hi <= 1");
  }
  if (!(crop_aspect[0] > 0.0 && crop_aspect[0] <= crop_aspect[1])) {
    throw std::invalid_argument("crop_aspect must satisfy 0 < lo <= hi");
  }
  if (jitter_max.brightness < 0 || jitter_max.contrast < 0 || jitter_max.saturation < 0 || jitter_max.hue < 0 ||
      jitter_max.hue > 0.5) {
    throw std::invalid_argument("jitter_max entries must be >= 0 and hue <= 0.5");
  }
}

CropBox sample_crop(std::size_t height, std::size_t width, const AugmentPolicy& policy, Rng& rng, bool* fallback) {
  const double h = double(height), w = double(width), area = h * w;
  for (int attempt = 0; attempt < kCropAttempts; ++attempt) {
    const double target = area * uniform(rng, policy.crop_scale[0], policy.crop_scale[1]);
    const double aspect = uniform(rng, policy.crop_aspect[0], policy.crop_aspect[1]);
    const double cw = std::sqrt(target * aspect), ch = std::sqrt(target / aspect);
    if (cw <= w && ch <= h) {
      if (fallback) *fallback = false;
      return {uniform(rng, 0.0, w - cw), uniform(rng, 0.0, h - ch), cw, ch};
    }
  }
  if (fallback) *fallback = true;
  const double ratio = w / h;
  double cw = w, ch = h;
  if (ratio < policy.crop_aspect[0]) {
    ch = w / policy.crop_aspect[0];
  } else if (ratio > policy.crop_aspect[1]) {
    cw = h * policy.crop_aspect[1];
  }
  return {(w - cw) / 2.0, (h - ch) / 2.0, cw, ch};
}

Image crop_resize(const Image& image, const CropBox& box, std::size_t out_h, std::size_t out_w) {
  Image out(out_h, out_w, image.channels);
  const double sy = box.height / double(out_h), sx = box.width / double(out_w);
  const auto last_y = double(image.height - 1), last_x = double(image.width - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp(box.y + (double(y) + 0.5) * sy - 0.5, 0.0, last_y);
    const auto y0 = std::size_t(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const float wy = float(fy - double(y0));
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp(box.x + (double(x) + 0.5) * sx - 0.5, 0.0, last_x);
      const auto x0 = std::size_t(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const float wx = float(fx - double(x0));
      for (std::size_t c = 0; c < image.channels; ++c) {
        const float top = image.at(y0, x0, c) + wx * (image.at(y0, x1, c) - image.at(y0, x0, c));
        const float bottom = image.at(y1, x0, c) + wx * (image.at(y1, x1, c) - image.at(y1, x0, c));
        out.at(y, x, c) = top + wy * (bottom - top);
      }
    }
  }
  return out;
}

void to_grayscale(Image& image) {
  require_rgb(image, "to_grayscale");
  for (std::size_t p = 0; p < image.height * image.width; ++p) {
    float* px = image.pixels.data() + p * 3;
    const float l = luma(px);
    px[0] = px[1] = px[2] = l;
  }
}

void adjust_brightness(Image& image, double factor) {
  for (auto& v : image.pixels) v *= float(factor);
  clamp01(image);
}

void adjust_contrast(Image& image, double factor) {
  require_rgb(image, "adjust_contrast");
  double total = 0;
  for (std::size_t p = 0; p < image.height * image.width; ++p) total += luma(image.pixels.data() + p * 3);
  const float m = float(total / double(image.height * image.width));
  blend(image, factor, [m](const float*) { return m; });
}

void adjust_saturation(Image& image, double factor) {
  require_rgb(image, "adjust_saturation");
  blend(image, factor, [](const float* px) { return luma(px); });
}

void adjust_hue(Image& image, double shift) {
  require_rgb(image, "adjust_hue");
  for (std::size_t p = 0; p < image.height * image.width; ++p) {
    float* px = image.pixels.data() + p * 3;
    const double r = px[0], g = px[1], b = px[2];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double delta = mx - mn;
    if (delta <= 0.0) continue;  // achromatic pixels have no hue
    double h;
    if (mx == r) {
      h = (g - b) / delta;
    } else if (mx == g) {
      h = 2.0 + (b - r) / delta;
    } else {
      h = 4.0 + (r - g) / delta;
    }
    h = h / 6.0 + shift;
    h -= std::floor(h);
    const double s = delta / mx, v = mx;
    const double hh = h * 6.0;
    const int sector = int(hh) % 6;
    const double f = hh - std::floor(hh);
    const double pv = v * (1 - s), qv = v * (1 - s * f), tv = v * (1 - s * (1 - f));
    double rgb[3];
    switch (sector) {
      case 0: rgb[0] = v, rgb[1] = tv, rgb[2] = pv; break;
      case 1: rgb[0] = qv, rgb[1] = v, rgb[2] = pv; break;
      case 2: rgb[0] = pv, rgb[1] = v, rgb[2] = tv; break;
      case 3: rgb[0] = pv, rgb[1] = qv, rgb[2] = v; break;
      case 4: rgb[0] = tv, rgb[1] = pv, rgb[2] = v; break;
      default: rgb[0] = v, rgb[1] = pv, rgb[2] = qv; break;
    }
    for (int c = 0; c < 3; ++c) px[c] = float(rgb[c]);
  }
  clamp01(image);
}

Image sample_view(const Image& image, const AugmentPolicy& policy, Rng& rng, ViewRecord* record) {
  require_rgb(image, "sample_view");
  ViewRecord rec;
  Image view = image;

  rec.flipped = bernoulli(rng, policy.flip_prob);
  if (rec.flipped) {
    for (std::size_t y = 0; y < view.height; ++y)
      for (std::size_t x = 0; x < view.width / 2; ++x)
        for (std::size_t c = 0; c < 3; ++c) std::swap(view.at(y, x, c), view.at(y, view.width - 1 - x, c));
  }

  rec.crop = sample_crop(view.height, view.width, policy, rng, &rec.fallback_crop);
  rec.area_fraction = rec.crop.width * rec.crop.height / double(view.height * view.width);
  rec.aspect = rec.crop.width / rec.crop.height;
  view = crop_resize(view, rec.crop, image.height, image.width);

  rec.grayscale = bernoulli(rng, policy.grayscale_prob);
  if (rec.grayscale) to_grayscale(view);

  rec.jittered = bernoulli(rng, policy.jitter_prob);
  if (rec.jittered) {
    const JitterStrength& m = policy.jitter_max;
    rec.brightness = jitter_factor(rng, m.brightness);
    rec.contrast = jitter_factor(rng, m.contrast);
    rec.saturation = jitter_factor(rng, m.saturation);
    rec.hue_shift = uniform(rng, -m.hue, m.hue);
    adjust_brightness(view, rec.brightness);
    adjust_contrast(view, rec.contrast);
    adjust_saturation(view, rec.saturation);
    adjust_hue(view, rec.hue_shift);
  }
  clamp01(view);
  if (record) *record = rec;
  return view;
}

std::vector<std::vector<Image>> augment_batch(std::span<const Image> batch, const AugmentPolicy& policy,
                                              std::size_t views, Rng& rng) {
  if (views < 1) throw std::invalid_argument("augment_batch: need at least one view");
  const std::uint64_t base = rng();
  std::vector<std::vector<Image>> out(views);
  for (std::size_t k = 0; k < views; ++k) {
    out[k].reserve(batch.size());
    for (std::size_t m = 0; m < batch.size(); ++m) {
      Rng stream(derive_seed({base, m, k}));
      out[k].push_back(sample_view(batch[m], policy, stream));
    }
  }
  return out;
}

}  // namespace relreason
