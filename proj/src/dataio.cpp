#include "relreason/dataio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "relreason/rng.hpp"

namespace relreason {

namespace {

const std::vector<std::string> kCifar10Names = {"airplane", "automobile", "bird",  "cat",  "deer",
                                                "dog",      "frog",       "horse", "ship", "truck"};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("path", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("path", "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("path", "write failed for " + path.string());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(std::uint8_t(v >> shift));
}

}  // namespace

// ---------------------------------------------------------------------------
// ImageDataset

std::size_t ImageDataset::size() const { return image_bytes() == 0 ? 0 : pixels.size() / image_bytes(); }

std::size_t ImageDataset::num_classes() const {
  if (!class_names.empty()) return class_names.size();
  int top = -1;
  for (int l : labels) top = std::max(top, l);
  return std::size_t(top + 1);
}

std::span<const std::uint8_t> ImageDataset::image(std::size_t index) const {
  return std::span<const std::uint8_t>(pixels).subspan(index * image_bytes(), image_bytes());
}

Image ImageDataset::image_float(std::size_t index) const {
  Image img(height, width, channels);
  auto src = image(index);
  for (std::size_t i = 0; i < src.size(); ++i) img.pixels[i] = float(src[i]) / 255.0f;
  return img;
}

std::vector<Image> ImageDataset::images_float(std::span<const std::size_t> indices) const {
  std::vector<Image> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(image_float(i));
  return out;
}

ImageDataset ImageDataset::subset(std::span<const std::size_t> indices) const {
  ImageDataset out;
  out.height = height;
  out.width = width;
  out.channels = channels;
  out.class_names = class_names;
  out.pixels.reserve(indices.size() * image_bytes());
  for (auto i : indices) {
    if (i >= size()) throw DataError("index", "subset index " + std::to_string(i) + " out of range");
    auto src = image(i);
    out.pixels.insert(out.pixels.end(), src.begin(), src.end());
    if (labeled()) out.labels.push_back(labels[i]);
  }
  return out;
}

void ImageDataset::validate() const {
  if (image_bytes() == 0) throw DataError("shape", "dataset has a zero image dimension");
  if (pixels.size() % image_bytes() != 0) throw DataError("pixels", "pixel buffer is not a whole number of images");
  if (labeled()) {
    if (labels.size() != size()) throw DataError("labels", "label count differs from image count");
    const std::size_t classes = num_classes();
    for (int l : labels) {
      if (l < 0 || std::size_t(l) >= classes) throw DataError("labels", "label " + std::to_string(l) + " out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// CIFAR binary

ImageDataset load_cifar_format(std::span<const std::filesystem::path> paths, std::size_t image_size,
                               std::size_t num_classes) {
  ImageDataset out;
  out.height = out.width = image_size;
  out.channels = 3;
  if (num_classes == 10) out.class_names = kCifar10Names;
  const std::size_t plane = image_size * image_size;
  const std::size_t record = 1 + 3 * plane;
  for (const auto& path : paths) {
    const auto bytes = read_file(path);
    if (bytes.size() % record != 0) {
      throw DataError("length", path.string() + ": " + std::to_string(bytes.size()) + " bytes is not a multiple of the " +
                                    std::to_string(record) + "-byte record");
    }
    const std::size_t count = bytes.size() / record;
    out.pixels.reserve(out.pixels.size() + count * 3 * plane);
    for (std::size_t r = 0; r < count; ++r) {
      const std::uint8_t* rec = bytes.data() + r * record;
      if (rec[0] >= num_classes) {
        throw DataError("label", path.string() + ": record " + std::to_string(r) + " has label " +
                                     std::to_string(rec[0]) + " >= " + std::to_string(num_classes));
      }
      out.labels.push_back(rec[0]);
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) out.pixels.push_back(rec[1 + c * plane + p]);
    }
  }
  if (num_classes != 10) {
    for (std::size_t c = 0; c < num_classes; ++c) out.class_names.push_back("class_" + std::to_string(c));
  }
  return out;
}

ImageDataset load_cifar10(std::span<const std::filesystem::path> paths) { return load_cifar_format(paths, 32, 10); }

std::vector<std::uint8_t> encode_cifar_record(const ImageDataset& data, std::size_t index) {
  if (data.channels != 3 || data.height != data.width) {
    throw DataError("shape", "CIFAR records need square RGB images");
  }
  const std::size_t plane = data.height * data.width;
  std::vector<std::uint8_t> rec(1 + 3 * plane);
  rec[0] = data.labeled() ? std::uint8_t(data.labels[index]) : 0;
  auto src = data.image(index);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) rec[1 + c * plane + p] = src[p * 3 + c];
  return rec;
}

void write_cifar_format(const std::filesystem::path& path, const ImageDataset& data) {
  std::vector<std::uint8_t> bytes;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto rec = encode_cifar_record(data, i);
    bytes.insert(bytes.end(), rec.begin(), rec.end());
  }
  write_file(path, bytes);
}

// ---------------------------------------------------------------------------
// IDX

ImageDataset load_idx(const std::filesystem::path& image_file, const std::filesystem::path& label_file) {
  const auto img = read_file(image_file);
  const auto lab = read_file(label_file);
  if (img.size() < 16) throw DataError("header", image_file.string() + ": truncated image header");
  if (read_be32(img, 0) != 0x00000803) throw DataError("magic", image_file.string() + ": bad image magic");
  if (lab.size() < 8) throw DataError("header", label_file.string() + ": truncated label header");
  if (read_be32(lab, 0) != 0x00000801) throw DataError("magic", label_file.string() + ": bad label magic");

  const std::size_t n = read_be32(img, 4), h = read_be32(img, 8), w = read_be32(img, 12);
  const std::size_t n_labels = read_be32(lab, 4);
  if (n != n_labels) {
    throw DataError("count", "image count " + std::to_string(n) + " differs from label count " + std::to_string(n_labels));
  }
  if (h == 0 || w == 0) throw DataError("dimensions", image_file.string() + ": zero image dimension");
  if (img.size() != 16 + n * h * w) throw DataError("payload", image_file.string() + ": payload size does not match header");
  if (lab.size() != 8 + n) throw DataError("payload", label_file.string() + ": payload size does not match header");

  ImageDataset out;
  out.height = h;
  out.width = w;
  out.channels = 1;
  out.pixels.assign(img.begin() + 16, img.end());
  out.labels.assign(lab.begin() + 8, lab.end());
  int top = 0;
  for (int l : out.labels) top = std::max(top, l);
  for (int c = 0; c <= top; ++c) out.class_names.push_back(std::to_string(c));
  return out;
}

void write_idx(const std::filesystem::path& image_file, const std::filesystem::path& label_file,
               const ImageDataset& data) {
  if (data.channels != 1) throw DataError("channels", "IDX images are single-channel");
  std::vector<std::uint8_t> img, lab;
  append_be32(img, 0x00000803);
  append_be32(img, std::uint32_t(data.size()));
  append_be32(img, std::uint32_t(data.height));
  append_be32(img, std::uint32_t(data.width));
  img.insert(img.end(), data.pixels.begin(), data.pixels.end());
  append_be32(lab, 0x00000801);
  append_be32(lab, std::uint32_t(data.size()));
  for (int l : data.labels) lab.push_back(std::uint8_t(l));
  write_file(image_file, img);
  write_file(label_file, lab);
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross, kDiamond, kRing, kStar, kCrescent };

struct Point {
  double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > y) != (poly[j].y > y) &&
        x < (poly[j].x - poly[i].x) * (y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x) {
      inside = !inside;
    }
  }
  return inside;
}

const std::vector<Point>& star_polygon() {
  static const std::vector<Point> poly = [] {
    std::vector<Point> p;
    for (int k = 0; k < 10; ++k) {
      const double r = k % 2 == 0 ? 1.0 : 0.45;
      const double a = -M_PI / 2 + k * M_PI / 5;  // first point straight up
      p.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return p;
  }();
  return poly;
}

// (u, v) in shape units, v pointing down.
bool inside_shape(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::kCircle: return u * u + v * v <= 1.0;
    case ShapeKind::kSquare: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeKind::kTriangle: {
      static const std::vector<Point> tri = {{0.0, -0.95}, {0.95, 0.75}, {-0.95, 0.75}};
      return inside_polygon(tri, u, v);
    }
    case ShapeKind::kCross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case ShapeKind::kDiamond: return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeKind::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case ShapeKind::kStar: return inside_polygon(star_polygon(), u, v);
    case ShapeKind::kCrescent: {
      const double du = u - 0.45, dv = v + 0.2;
      return u * u + v * v <= 1.0 && du * du + dv * dv > 0.8 * 0.8;
    }
  }
  return false;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int sector = int(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

const std::vector<std::string>& synth_shape_names() {
  static const std::vector<std::string> names = {"circle", "square", "triangle", "cross",
                                                 "diamond", "ring",  "star",     "crescent"};
  return names;
}

ImageDataset synth_shapes(std::size_t n, std::size_t num_classes, std::size_t size, std::uint64_t seed) {
  if (num_classes < 2 || num_classes > kSynthShapeKinds) {
    throw DataError("classes", "synth_shapes supports 2.." + std::to_string(kSynthShapeKinds) + " classes, got " +
                                   std::to_string(num_classes));
  }
  if (size < 16) throw DataError("size", "synth_shapes needs size >= 16, got " + std::to_string(size));

  ImageDataset out;
  out.height = out.width = size;
  out.channels = 3;
  out.class_names.assign(synth_shape_names().begin(), synth_shape_names().begin() + std::ptrdiff_t(num_classes));
  out.pixels.resize(n * size * size * 3);
  out.labels.resize(n);

  constexpr int kSuper = 3;  // supersampling per axis for edge coverage
  const double s = double(size);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = int(i % num_classes);
    out.labels[i] = label;
    Rng rng(derive_seed({seed, i}));

    const double radius = s * uniform(rng, 0.2, 0.34);
    const double cx = uniform(rng, radius + 1.0, s - radius - 1.0);
    const double cy = uniform(rng, radius + 1.0, s - radius - 1.0);
    const auto fg = hsv_to_rgb(uniform(rng, 0.0, 1.0), uniform(rng, 0.5, 1.0), uniform(rng, 0.75, 1.0));
    const auto bg = hsv_to_rgb(uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 0.35), 1.0);
    const double top_light = uniform(rng, 0.55, 0.75), bottom_light = uniform(rng, 0.1, 0.3);
    const double shadow = s / 16.0;
    std::normal_distribution<double> noise(0.0, 0.04);
    const auto kind = static_cast<ShapeKind>(label);

    std::uint8_t* dst = out.pixels.data() + i * size * size * 3;
    for (std::size_t y = 0; y < size; ++y) {
      const double light = top_light + (bottom_light - top_light) * (double(y) + 0.5) / s;
      for (std::size_t x = 0; x < size; ++x) {
        int cover = 0, shade = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = double(x) + (sx + 0.5) / kSuper, py = double(y) + (sy + 0.5) / kSuper;
            if (inside_shape(kind, (px - cx) / radius, (py - cy) / radius)) {
              ++cover;
            } else if (inside_shape(kind, (px - cx - shadow) / radius, (py - cy - shadow) / radius)) {
              ++shade;
            }
          }
        const double a = double(cover) / (kSuper * kSuper);
        const double d = double(shade) / (kSuper * kSuper);
        for (std::size_t c = 0; c < 3; ++c) {
          const double back = bg[c] * light * (1.0 - 0.6 * d);
          const double v = a * fg[c] + (1.0 - a) * back + noise(rng);
          dst[(y * size + x) * 3 + c] = std::uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    }
  }
  return out;
}

TrainTestSplit split_train_test(const ImageDataset& data, std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({seed, 0x5117ULL}));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> train, test;
  for (std::size_t k = 0; k < order.size(); ++k) (k % 5 == 4 ? test : train).push_back(order[k]);
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {data.subset(train), data.subset(test)};
}

}  // namespace relreason
