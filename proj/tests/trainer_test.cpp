#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "relreason/trainer.hpp"

namespace relreason {
namespace {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  const std::string s = read_file(path);
  return {s.begin(), s.end()};
}

std::size_t count_lines(const std::string& text) { return std::size_t(std::count(text.begin(), text.end(), '\n')); }

class TrainerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("relreason_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // 160 train / 40 test, 16 px.
  TrainConfig small_config(const std::string& name) const {
    TrainConfig c;
    c.synth_n = 200;
    c.synth_size = 16;
    c.batch_size = 16;
    c.views = 3;
    c.epochs = 2;
    c.seed = 4;
    c.probe_epochs = 5;
    c.out_dir = (dir_ / name).string();
    return c;
  }

  fs::path dir_;
};

TEST(ConfigTest, ParsesKeysAndComments) {
  const TrainConfig c = parse_config(
      "# comment\n"
      "method = rotation   # trailing\n"
      "  views=6\n"
      "gamma = 0.5\n"
      "aggregation = max\n"
      "record_elapsed = true\n"
      "\n"
      "out_dir = some/dir\n");
  EXPECT_EQ(c.method, Method::kRotation);
  EXPECT_EQ(c.views, 6u);
  EXPECT_EQ(c.gamma, 0.5);
  EXPECT_EQ(c.aggregation, AggregationMode::kMax);
  EXPECT_TRUE(c.record_elapsed);
  EXPECT_EQ(c.out_dir, "some/dir");
}

std::string error_field(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

TEST(ConfigTest, ErrorsNameTheField) {
  EXPECT_EQ(error_field("colour = red\n"), "colour");
  EXPECT_EQ(error_field("views = many\n"), "views");
  EXPECT_EQ(error_field("gamma = -1\n"), "gamma");
  EXPECT_EQ(error_field("label_fraction = 1.5\n"), "label_fraction");
  EXPECT_EQ(error_field("views = 1\n"), "views");
  EXPECT_EQ(error_field("method = magic\n"), "method");
  EXPECT_EQ(error_field("aggregation = product\n"), "aggregation");
  EXPECT_EQ(error_field("dataset = cifar10\n"), "data_dir");
  EXPECT_EQ(error_field("just a line\n"), "line 1");
  EXPECT_EQ(error_field("method = rotation\nviews = 1\n"), "");
}

TEST(ConfigTest, CanonicalTextRoundTrips) {
  TrainConfig c;
  c.gamma = 0.1;
  c.lr_head = 3e-4;
  c.method = Method::kAblationB;
  const std::string text = c.to_text();
  EXPECT_EQ(parse_config(text).to_text(), text);
}

TEST(CheckpointTest, EncodeDecodeEncodeIsIdentical) {
  Checkpoint c;
  c.tensors.push_back({"a", Tensor<float>(Shape{2, 3}, {1, 2, 3, 4, 5, -6.5f})});
  c.tensors.push_back({"b.step", Tensor<float>(Shape{1}, {7})});
  c.config = "seed = 1\n";
  const auto bytes = encode_checkpoint(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SSRR");
  EXPECT_EQ(encode_checkpoint(decode_checkpoint(bytes)), bytes);
  // 4 + 4 + 4 + (4 + 1 + 4 + 16 + 24) + (4 + 6 + 4 + 8 + 4) + 8 + 9
  EXPECT_EQ(bytes.size(), 12u + 49 + 26 + 17);
}

std::string decode_error(std::vector<std::uint8_t> bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const DataError& e) {
    return e.field();
  }
  return "";
}

TEST(CheckpointTest, RejectsCorruptInput) {
  Checkpoint c;
  c.tensors.push_back({"a", Tensor<float>(Shape{2}, {1, 2})});
  const auto good = encode_checkpoint(c);
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(decode_error(bad_magic), "magic");
  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(decode_error(bad_version), "version");
  EXPECT_EQ(decode_error({good.begin(), good.end() - 3}), "truncated");
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), "trailing");
}

TEST_F(TrainerTest, ZeroEpochsSavesInitialization) {
  TrainConfig c = small_config("zero");
  c.epochs = 0;
  train(c);
  EXPECT_EQ(read_file(fs::path(c.out_dir) / "metrics.csv"), "epoch,step,loss,pair_acc,lr,elapsed_s\n");
  const Checkpoint saved = load_checkpoint(fs::path(c.out_dir) / "checkpoint.ssrr");
  const Model fresh(c, 4);
  const auto expected = fresh.tensors();
  ASSERT_GE(saved.tensors.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(saved.tensors[i].name, expected[i].name);
    EXPECT_TRUE(std::equal(expected[i].tensor.data().begin(), expected[i].tensor.data().end(),
                           saved.tensors[i].tensor.data().begin()));
  }
  EXPECT_EQ(saved.config, c.model_text());
  EXPECT_EQ(saved.config.find("out_dir"), std::string::npos);
}

TEST_F(TrainerTest, SameSeedGivesIdenticalMetricsAndCheckpoints) {
  TrainConfig a = small_config("a"), b = small_config("b");
  train(a);
  train(b);
  const std::string metrics = read_file(fs::path(a.out_dir) / "metrics.csv");
  EXPECT_EQ(metrics, read_file(fs::path(b.out_dir) / "metrics.csv"));
  // 160 / 16 = 10 steps per epoch.
  EXPECT_EQ(count_lines(metrics), 2u * 10 + 1);
  EXPECT_EQ(read_bytes(fs::path(a.out_dir) / "checkpoint.ssrr"), read_bytes(fs::path(b.out_dir) / "checkpoint.ssrr"));

  TrainConfig other = small_config("other");
  other.seed = 5;
  train(other);
  EXPECT_NE(metrics, read_file(fs::path(other.out_dir) / "metrics.csv"));
}

TEST_F(TrainerTest, CheckpointRoundTripIsByteIdentical) {
  TrainConfig c = small_config("rt");
  c.epochs = 1;
  train(c);
  const fs::path first = fs::path(c.out_dir) / "checkpoint.ssrr", second = dir_ / "again.ssrr";
  save_checkpoint(second, load_checkpoint(first));
  EXPECT_EQ(read_bytes(first), read_bytes(second));
}

TEST_F(TrainerTest, DropsLastPartialBatch) {
  TrainConfig c = small_config("drop");
  c.batch_size = 24;  // 160 = 6 * 24 + 16
  c.epochs = 1;
  train(c);
  EXPECT_EQ(count_lines(read_file(fs::path(c.out_dir) / "metrics.csv")), 6u + 1);
}

TEST_F(TrainerTest, MetricsRowsFollowTheHeader) {
  TrainConfig c = small_config("rows");
  c.epochs = 1;
  train(c);
  std::istringstream in(read_file(fs::path(c.out_dir) / "metrics.csv"));
  std::string line;
  std::getline(in, line);
  std::size_t step = 0;
  while (std::getline(in, line)) {
    ++step;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    ASSERT_EQ(cells.size(), 6u) << line;
    EXPECT_EQ(cells[0], "1");
    EXPECT_EQ(cells[1], std::to_string(step));
    const double pair_acc = std::stod(cells[3]);
    EXPECT_GE(pair_acc, 0.0);
    EXPECT_LE(pair_acc, 1.0);
    EXPECT_EQ(cells[4], "0.001");
    EXPECT_EQ(cells[5], "");
  }
}

TEST_F(TrainerTest, PeriodicCheckpoints) {
  TrainConfig c = small_config("periodic");
  c.epochs = 3;
  c.checkpoint_every = 2;
  train(c);
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "checkpoint_epoch_2.ssrr"));
  EXPECT_FALSE(fs::exists(fs::path(c.out_dir) / "checkpoint_epoch_3.ssrr"));
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "checkpoint.ssrr"));
}

TEST(EpochOrderTest, EveryInstanceOncePerEpoch) {
  for (std::size_t epoch = 1; epoch <= 3; ++epoch) {
    auto order = epoch_order(7, epoch, 100);
    EXPECT_EQ(order, epoch_order(7, epoch, 100));
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> expected(100);
    std::iota(expected.begin(), expected.end(), 0);
    EXPECT_EQ(order, expected);
  }
  EXPECT_NE(epoch_order(7, 1, 100), epoch_order(7, 2, 100));
}

TEST_F(TrainerTest, EveryMethodRuns) {
  for (Method m : {Method::kRotation, Method::kSupervised, Method::kAblationA, Method::kAblationB, Method::kRandom}) {
    TrainConfig c = small_config(method_name(m));
    c.method = m;
    c.epochs = 1;
    const TrainResult r = train(c);
    EXPECT_EQ(r.epochs.size(), m == Method::kRandom ? 0u : 1u) << method_name(m);
    const std::string metrics = read_file(fs::path(c.out_dir) / "metrics.csv");
    if (m == Method::kRotation || m == Method::kSupervised) {
      EXPECT_NE(metrics.find("1,1,"), std::string::npos);
      EXPECT_NE(metrics.find(",,0."), std::string::npos) << "pair_acc must be empty";
    }
  }
}

TEST_F(TrainerTest, SemiSupervisedRuns) {
  TrainConfig c = small_config("semi");
  c.label_fraction = 0.5;
  c.avoid_negative_collisions = true;
  c.epochs = 1;
  const TrainResult r = train(c);
  EXPECT_TRUE(std::isfinite(r.epochs.front().mean_loss));
}

TEST_F(TrainerTest, SupervisedRequiresLabels) {
  TrainConfig c = small_config("unlabeled");
  c.method = Method::kSupervised;
  Datasets data = load_datasets(c);
  data.train.labels.clear();
  EXPECT_THROW(train(c, data, {.write_files = false}), ConfigError);
}

TEST_F(TrainerTest, SupervisedLossDropsAfterOneEpoch) {
  TrainConfig c = small_config("sup");
  c.method = Method::kSupervised;
  c.epochs = 1;
  c.synth_n = 600;
  const Datasets data = load_datasets(c);
  std::vector<std::size_t> first(256);
  std::iota(first.begin(), first.end(), 0);
  const Tensor<float> x = images_to_tensor<float>(data.train.images_float(first));
  const std::vector<int> y(data.train.labels.begin(), data.train.labels.begin() + 256);
  const auto loss_of = [&](Model& m) {
    NoGradGuard no_grad;
    return softmax_cross_entropy((*m.classifier)(m.backbone(x, Mode::kTrain)), std::span<const int>(y)).item();
  };
  Model initial(c, 4);
  const TrainResult trained = train(c, data, {.write_files = false});
  EXPECT_LT(loss_of(*trained.model), loss_of(initial));
}

TEST_F(TrainerTest, EvaluateIsRepeatableAndNormalized) {
  TrainConfig c = small_config("eval");
  c.epochs = 1;
  train(c);
  const fs::path ckpt = fs::path(c.out_dir) / "checkpoint.ssrr";
  const EvalReport first = evaluate(c, ckpt, {.linear = true, .knn_k = 5});
  const std::string eval_csv = read_file(fs::path(c.out_dir) / "eval.csv");
  const std::string confusion_csv = read_file(fs::path(c.out_dir) / "confusion.csv");
  evaluate(c, ckpt, {.linear = true, .knn_k = 5});
  EXPECT_EQ(read_file(fs::path(c.out_dir) / "eval.csv"), eval_csv);
  EXPECT_EQ(read_file(fs::path(c.out_dir) / "confusion.csv"), confusion_csv);
  EXPECT_EQ(eval_csv.rfind("metric,value\nlinear_test_accuracy,", 0), 0u);
  EXPECT_NE(eval_csv.find("knn_k,5\n"), std::string::npos);
  ASSERT_EQ(first.confusion.size(), 4u);
  for (const auto& row : first.confusion) EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
  EXPECT_EQ(count_lines(confusion_csv), 5u);
}

TEST_F(TrainerTest, EvaluateRejectsMismatchedArchitecture) {
  TrainConfig c = small_config("arch");
  c.epochs = 0;
  train(c);
  TrainConfig rotation = c;
  rotation.method = Method::kRotation;
  try {
    evaluate(rotation, fs::path(c.out_dir) / "checkpoint.ssrr", {});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.field(), "architecture");
  }
  std::ofstream(dir_ / "junk.ssrr") << "JUNKJUNK";
  EXPECT_THROW(evaluate(c, dir_ / "junk.ssrr", {}), DataError);
}

TEST_F(TrainerTest, UnwritableOutputIsAnIoError) {
  TrainConfig c = small_config("blocked");
  std::ofstream(dir_ / "file") << "x";
  c.out_dir = (dir_ / "file" / "sub").string();
  EXPECT_ANY_THROW(train(c));
}

TEST_F(TrainerTest, LoadsSynthWrittenInCifarFormat) {
  const auto split = split_train_test(synth_shapes(100, 4, 16, 1), 1);
  write_cifar_format(dir_ / "train.bin", split.train);
  write_cifar_format(dir_ / "test.bin", split.test);
  TrainConfig c;
  c.dataset = DatasetKind::kCifar10;
  c.data_dir = dir_.string();
  c.image_size = 16;
  c.num_classes = 4;
  const Datasets data = load_datasets(c);
  EXPECT_EQ(data.train.size(), 80u);
  EXPECT_EQ(data.test.size(), 20u);
  EXPECT_EQ(data.train.pixels, split.train.pixels);
}

TEST_F(TrainerTest, GrayscaleIdxBecomesRgb) {
  ImageDataset gray;
  gray.height = gray.width = 12;
  gray.channels = 1;
  gray.pixels.assign(3 * 144, 0);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) gray.pixels[i] = std::uint8_t(i % 251);
  gray.labels = {0, 1, 2};
  write_idx(dir_ / "i", dir_ / "l", gray);
  TrainConfig c;
  c.dataset = DatasetKind::kIdx;
  c.train_images = c.test_images = (dir_ / "i").string();
  c.train_labels = c.test_labels = (dir_ / "l").string();
  const Datasets data = load_datasets(c);
  ASSERT_EQ(data.train.channels, 3u);
  const auto px = data.train.image(1);
  EXPECT_EQ(px[3 * 5], gray.pixels[144 + 5]);
  EXPECT_EQ(px[3 * 5 + 2], gray.pixels[144 + 5]);
}

}  // namespace
}  // namespace relreason
