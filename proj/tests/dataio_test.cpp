#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "relreason/dataio.hpp"

namespace relreason {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("relreason_dataio_" + std::to_string(std::random_device{}()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> random_cifar_bytes(std::size_t records, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> bytes(records * 3073);
  for (std::size_t r = 0; r < records; ++r) {
    bytes[r * 3073] = std::uint8_t(rng() % 10);
    for (std::size_t k = 1; k < 3073; ++k) bytes[r * 3073 + k] = std::uint8_t(rng());
  }
  return bytes;
}

// Straight planar decode, written independently of the loader.
struct ReferenceRecord {
  int label;
  std::uint8_t rgb[32][32][3];
};

ReferenceRecord reference_cifar_record(const std::vector<std::uint8_t>& bytes, std::size_t r) {
  ReferenceRecord rec{};
  const std::uint8_t* p = bytes.data() + r * 3073;
  rec.label = p[0];
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) rec.rgb[y][x][c] = p[1 + c * 1024 + y * 32 + x];
  return rec;
}

void expect_matches_reference(const ImageDataset& data, const std::vector<std::uint8_t>& bytes, std::size_t r) {
  const ReferenceRecord ref = reference_cifar_record(bytes, r);
  EXPECT_EQ(data.labels[r], ref.label);
  auto img = data.image(r);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_EQ(img[(y * 32 + x) * 3 + c], ref.rgb[y][x][c]);
}

void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(std::uint8_t(v >> shift));
}

std::vector<std::uint8_t> idx_images(std::uint32_t magic, std::uint32_t n, std::uint32_t h, std::uint32_t w,
                                     std::size_t payload) {
  std::vector<std::uint8_t> out;
  append_be32(out, magic);
  append_be32(out, n);
  append_be32(out, h);
  append_be32(out, w);
  out.resize(out.size() + payload, 7);
  return out;
}

std::vector<std::uint8_t> idx_labels(std::uint32_t magic, std::uint32_t n, std::size_t payload) {
  std::vector<std::uint8_t> out;
  append_be32(out, magic);
  append_be32(out, n);
  for (std::size_t i = 0; i < payload; ++i) out.push_back(std::uint8_t(i % 10));
  return out;
}

std::string data_error_field(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.field();
  }
  return "<no error>";
}

TEST(CifarTest, TenRecordsDecodeToTenImages) {
  TempDir dir;
  const auto bytes = random_cifar_bytes(10, 1);
  ASSERT_EQ(bytes.size(), 30730u);
  write_bytes(dir / "batch.bin", bytes);
  const std::vector<fs::path> paths{dir / "batch.bin"};
  const ImageDataset data = load_cifar10(paths);
  EXPECT_EQ(data.size(), 10u);
  EXPECT_EQ(data.height, 32u);
  EXPECT_EQ(data.width, 32u);
  EXPECT_EQ(data.channels, 3u);
  for (std::size_t r = 0; r < 10; ++r) expect_matches_reference(data, bytes, r);
}

TEST(CifarTest, AllWhiteRecord) {
  TempDir dir;
  std::vector<std::uint8_t> bytes(3073, 255);
  bytes[0] = 4;
  write_bytes(dir / "white.bin", bytes);
  const std::vector<fs::path> paths{dir / "white.bin"};
  const ImageDataset data = load_cifar10(paths);
  ASSERT_EQ(data.size(), 1u);
  EXPECT_EQ(data.labels[0], 4);
  for (auto v : data.image(0)) EXPECT_EQ(v, 255);
}

TEST(CifarTest, RecordOrderPreservedAcrossFiles) {
  TempDir dir;
  const auto a = random_cifar_bytes(3, 11), b = random_cifar_bytes(2, 12);
  write_bytes(dir / "a.bin", a);
  write_bytes(dir / "b.bin", b);
  const std::vector<fs::path> paths{dir / "a.bin", dir / "b.bin"};
  const ImageDataset data = load_cifar10(paths);
  ASSERT_EQ(data.size(), 5u);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(data.labels[r], a[r * 3073]);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_EQ(data.labels[3 + r], b[r * 3073]);
}

TEST(CifarTest, RejectsPartialRecord) {
  TempDir dir;
  auto bytes = random_cifar_bytes(2, 2);
  bytes.pop_back();
  write_bytes(dir / "short.bin", bytes);
  const std::vector<fs::path> paths{dir / "short.bin"};
  EXPECT_EQ(data_error_field([&] { load_cifar10(paths); }), "length");
}

TEST(CifarTest, RejectsLabelOutOfRange) {
  TempDir dir;
  auto bytes = random_cifar_bytes(2, 3);
  bytes[3073] = 10;
  write_bytes(dir / "bad.bin", bytes);
  const std::vector<fs::path> paths{dir / "bad.bin"};
  EXPECT_EQ(data_error_field([&] { load_cifar10(paths); }), "label");
}

TEST(CifarTest, MissingFileIsDataError) {
  const std::vector<fs::path> paths{"/nonexistent/relreason/batch.bin"};
  EXPECT_THROW(load_cifar10(paths), DataError);
}

TEST(CifarTest, ReencodingReproducesSourceBytes) {
  TempDir dir;
  const auto bytes = random_cifar_bytes(6, 5);
  write_bytes(dir / "src.bin", bytes);
  const std::vector<fs::path> paths{dir / "src.bin"};
  const ImageDataset data = load_cifar10(paths);
  for (std::size_t r = 0; r < data.size(); ++r) {
    const auto rec = encode_cifar_record(data, r);
    ASSERT_TRUE(std::equal(rec.begin(), rec.end(), bytes.begin() + std::ptrdiff_t(r * 3073)));
  }
  write_cifar_format(dir / "copy.bin", data);
  EXPECT_EQ(read_bytes(dir / "copy.bin"), bytes);
}

// Runs only when the published batches are available locally.
TEST(CifarTest, PublishedFirstRecordMatchesReferenceReader) {
  const char* root = std::getenv("RELREASON_CIFAR10_DIR");
  if (!root) GTEST_SKIP() << "RELREASON_CIFAR10_DIR not set";
  const fs::path file = fs::path(root) / "data_batch_1.bin";
  if (!fs::exists(file)) GTEST_SKIP() << file << " not found";
  const auto bytes = read_bytes(file);
  const std::vector<fs::path> paths{file};
  const ImageDataset data = load_cifar10(paths);
  EXPECT_EQ(data.size(), 10000u);
  expect_matches_reference(data, bytes, 0);
}

TEST(IdxTest, HeaderEcho) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(0x803, 60000, 28, 28, std::size_t(60000) * 28 * 28));
  write_bytes(dir / "lab", idx_labels(0x801, 60000, 60000));
  const ImageDataset data = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(data.size(), 60000u);
  EXPECT_EQ(data.height, 28u);
  EXPECT_EQ(data.width, 28u);
  EXPECT_EQ(data.channels, 1u);
  EXPECT_EQ(data.labels[13], 3);
}

TEST(IdxTest, CountMismatchRejected) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(0x803, 5, 4, 4, 80));
  write_bytes(dir / "lab", idx_labels(0x801, 6, 6));
  EXPECT_EQ(data_error_field([&] { load_idx(dir / "img", dir / "lab"); }), "count");
}

TEST(IdxTest, BadMagicRejected) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(0x801, 5, 4, 4, 80));
  write_bytes(dir / "lab", idx_labels(0x801, 5, 5));
  EXPECT_EQ(data_error_field([&] { load_idx(dir / "img", dir / "lab"); }), "magic");
  write_bytes(dir / "img", idx_images(0x803, 5, 4, 4, 80));
  write_bytes(dir / "lab", idx_labels(0x803, 5, 5));
  EXPECT_EQ(data_error_field([&] { load_idx(dir / "img", dir / "lab"); }), "magic");
}

TEST(IdxTest, TruncatedPayloadRejected) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(0x803, 5, 4, 4, 79));
  write_bytes(dir / "lab", idx_labels(0x801, 5, 5));
  EXPECT_EQ(data_error_field([&] { load_idx(dir / "img", dir / "lab"); }), "payload");
  write_bytes(dir / "img", std::vector<std::uint8_t>{0, 0, 8, 3, 0});
  EXPECT_EQ(data_error_field([&] { load_idx(dir / "img", dir / "lab"); }), "header");
}

TEST(IdxTest, WriteLoadRoundTrip) {
  TempDir dir;
  ImageDataset data;
  data.height = 3;
  data.width = 2;
  data.channels = 1;
  data.pixels = {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255};
  data.labels = {7, 2};
  write_idx(dir / "img", dir / "lab", data);
  const ImageDataset back = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(back.pixels, data.pixels);
  EXPECT_EQ(back.labels, data.labels);
}

TEST(IdxTest, PublishedFirstMnistLabelIsFive) {
  const char* root = std::getenv("RELREASON_MNIST_DIR");
  if (!root) GTEST_SKIP() << "RELREASON_MNIST_DIR not set";
  const fs::path images = fs::path(root) / "train-images-idx3-ubyte";
  const fs::path labels = fs::path(root) / "train-labels-idx1-ubyte";
  if (!fs::exists(images) || !fs::exists(labels)) GTEST_SKIP() << "MNIST files not found";
  const auto raw = read_bytes(labels);
  ASSERT_GT(raw.size(), 8u);
  const ImageDataset data = load_idx(images, labels);
  EXPECT_EQ(data.labels[0], raw[8]);
  EXPECT_EQ(data.labels[0], 5);
}

TEST(SynthTest, ClassesAreBalanced) {
  const ImageDataset data = synth_shapes(400, 4, 32, 7);
  ASSERT_EQ(data.size(), 400u);
  std::vector<int> counts(4, 0);
  for (int l : data.labels) ++counts.at(std::size_t(l));
  for (int c : counts) EXPECT_EQ(c, 100);
  EXPECT_NO_THROW(data.validate());
}

TEST(SynthTest, DeterministicInSeed) {
  const ImageDataset a = synth_shapes(64, 8, 24, 99);
  const ImageDataset b = synth_shapes(64, 8, 24, 99);
  const ImageDataset c = synth_shapes(64, 8, 24, 100);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
}

TEST(SynthTest, PrefixIndependentOfCount) {
  const ImageDataset small = synth_shapes(8, 4, 16, 3);
  const ImageDataset large = synth_shapes(20, 4, 16, 3);
  EXPECT_TRUE(std::equal(small.pixels.begin(), small.pixels.end(), large.pixels.begin()));
}

TEST(SynthTest, RejectsTooManyClassesAndSmallSize) {
  EXPECT_EQ(data_error_field([] { synth_shapes(10, 9, 32, 0); }), "classes");
  EXPECT_EQ(data_error_field([] { synth_shapes(10, 4, 15, 0); }), "size");
}

TEST(SynthTest, SplitIsEightyTwentyAndDisjoint) {
  const ImageDataset data = synth_shapes(500, 4, 16, 1);
  const TrainTestSplit split = split_train_test(data, 1);
  EXPECT_EQ(split.train.size(), 400u);
  EXPECT_EQ(split.test.size(), 100u);
  EXPECT_EQ(split.train.height, 16u);
}

TEST(SynthTest, OneNearestNeighborBeatsChance) {
  const ImageDataset data = synth_shapes(1000, 4, 32, 21);
  const TrainTestSplit split = split_train_test(data, 21);
  const std::size_t bytes = split.train.image_bytes();
  std::size_t correct = 0;
  for (std::size_t q = 0; q < split.test.size(); ++q) {
    auto query = split.test.image(q);
    double best = std::numeric_limits<double>::infinity();
    int best_label = -1;
    for (std::size_t g = 0; g < split.train.size(); ++g) {
      auto item = split.train.image(g);
      double d = 0;
      for (std::size_t k = 0; k < bytes; ++k) {
        const double diff = double(query[k]) - double(item[k]);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_label = split.train.labels[g];
      }
    }
    correct += best_label == split.test.labels[q];
  }
  const double accuracy = double(correct) / double(split.test.size());
  RecordProperty("one_nn_accuracy", std::to_string(accuracy));
  EXPECT_GT(accuracy, 0.25);
}

}  // namespace
}  // namespace relreason
