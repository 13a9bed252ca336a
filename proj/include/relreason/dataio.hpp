#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "relreason/image.hpp"

namespace relreason {

/// Malformed or unreadable dataset file. `field()` names the offending part.
class DataError : public std::runtime_error {
 public:
  DataError(std::string field, const std::string& message)
      : std::runtime_error(message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Decoded 8-bit images, stored H x W x C per image in one flat buffer.
struct ImageDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;  // empty when unlabeled
  std::vector<std::string> class_names;

  std::size_t size() const;
  std::size_t image_bytes() const { return height * width * channels; }
  bool labeled() const { return !labels.empty(); }
  std::size_t num_classes() const;

  std::span<const std::uint8_t> image(std::size_t index) const;
  /// u8 -> [0, 1] float conversion.
  Image image_float(std::size_t index) const;
  std::vector<Image> images_float(std::span<const std::size_t> indices) const;

  ImageDataset subset(std::span<const std::size_t> indices) const;
  /// Throws DataError when the invariants do not hold.
  void validate() const;
};

/// CIFAR-10 binary batches: records of 1 label byte + 3072 planar pixel bytes.
ImageDataset load_cifar10(std::span<const std::filesystem::path> paths);
/// Same record layout with a configurable square size and class count.
ImageDataset load_cifar_format(std::span<const std::filesystem::path> paths, std::size_t image_size,
                               std::size_t num_classes);
std::vector<std::uint8_t> encode_cifar_record(const ImageDataset& data, std::size_t index);
void write_cifar_format(const std::filesystem::path& path, const ImageDataset& data);

/// IDX image file (magic 0x00000803) plus label file (magic 0x00000801).
ImageDataset load_idx(const std::filesystem::path& image_file, const std::filesystem::path& label_file);
void write_idx(const std::filesystem::path& image_file, const std::filesystem::path& label_file,
               const ImageDataset& data);

inline constexpr std::size_t kSynthShapeKinds = 8;
const std::vector<std::string>& synth_shape_names();

/// RGB images with one filled shape each; the label is the shape kind. Shape
/// position, scale, hue, background tint and noise are randomized, the
/// background is lit from above and the shape casts a shadow down-right.
/// Labels cycle 0..num_classes-1, so classes are exactly balanced when
/// num_classes divides n. Pure function of its arguments.
ImageDataset synth_shapes(std::size_t n, std::size_t num_classes, std::size_t size, std::uint64_t seed);

struct TrainTestSplit {
  ImageDataset train;
  ImageDataset test;
};

/// Seeded permutation; every fifth position goes to test (80/20).
TrainTestSplit split_train_test(const ImageDataset& data, std::uint64_t seed);

}  // namespace relreason
