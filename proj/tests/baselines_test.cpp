#include <cmath>

#include <gtest/gtest.h>

#include "relreason/baselines.hpp"
#include "relreason/dataio.hpp"

namespace relreason {
namespace {

using Td = Tensor<double>;

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image img(h, w, 3);
  for (auto& v : img.pixels) v = float(uniform(rng, 0, 1));
  return img;
}

TEST(RotationTest, FourQuarterTurnsAreIdentity) {
  Rng rng(1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{6, 6}, {5, 7}}) {
    const Image img = random_image(h, w, rng);
    Image turned = img;
    for (int i = 0; i < 4; ++i) turned = rotate90_ccw(turned);
    EXPECT_EQ(turned, img);
    EXPECT_NE(rotate90_ccw(img), img);
  }
}

TEST(RotationTest, CounterClockwiseConvention) {
  // [[a, b], [c, d]] -> [[b, d], [a, c]].
  Image img(2, 2, 1);
  img.pixels = {1, 2, 3, 4};
  EXPECT_EQ(rotate90_ccw(img).pixels, (std::vector<float>{2, 4, 1, 3}));
}

TEST(RotationTest, RotateAndLabelCounts) {
  Rng rng(2);
  std::vector<Image> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(random_image(4, 4, rng));
  const RotatedBatch out = rotate_and_label(batch);
  ASSERT_EQ(out.images.size(), 32u);
  for (int r = 0; r < 4; ++r) EXPECT_EQ(std::count(out.labels.begin(), out.labels.end(), r), 8);
  EXPECT_EQ(out.images[3], batch[3]);
  EXPECT_EQ(out.images[8 + 3], rotate90_ccw(batch[3]));
  EXPECT_EQ(out.labels[8 + 3], 1);
}

TEST(RotationTest, RejectsNonSquare) {
  Rng rng(3);
  const std::vector<Image> batch{random_image(4, 5, rng)};
  EXPECT_THROW(rotate_and_label(batch), std::invalid_argument);
}

Td row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Td(Shape{1, n}, std::move(values));
}

TEST(AblationTest, DotProductScores) {
  auto scorer = make_scorer<double>(AblationHeadKind::kDotProduct, 4);
  std::vector<double> e0{1, 0, 0, 0}, e1{0, 1, 0, 0};
  EXPECT_NEAR(ablation_score(row(e0), row(e0), *scorer), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(ablation_score(row(e0), row(e0), *scorer), 0.73106, 1e-5);
  EXPECT_DOUBLE_EQ(ablation_score(row(e0), row(e1), *scorer), 0.5);
  EXPECT_TRUE(scorer->parameters().empty());
}

TEST(AblationTest, DotProductScorersAreSymmetric) {
  Rng rng(4);
  auto a = make_scorer<double>(AblationHeadKind::kDotProduct, 64);
  auto b = make_scorer<double>(AblationHeadKind::kEncoderDotProduct, 64);
  b->init(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(64), y(64);
    for (auto& v : x) v = uniform(rng, -1, 1);
    for (auto& v : y) v = uniform(rng, -1, 1);
    ASSERT_EQ(ablation_score(row(x), row(y), *a), ablation_score(row(y), row(x), *a));
    ASSERT_NEAR(ablation_score(row(x), row(y), *b), ablation_score(row(y), row(x), *b), 1e-15);
  }
}

TEST(AblationTest, EncoderParameterCountIsPinned) {
  auto b = make_scorer<float>(AblationHeadKind::kEncoderDotProduct, 64);
  EXPECT_EQ(count_elements(b->parameters()), 33600u);
}

TEST(AblationTest, RejectsWidthMismatch) {
  auto a = make_scorer<double>(AblationHeadKind::kDotProduct, 4);
  EXPECT_THROW(ablation_score(row({1, 2}), row({1, 2, 3}), *a), ShapeError);
  auto b = make_scorer<double>(AblationHeadKind::kEncoderDotProduct, 64);
  EXPECT_THROW(ablation_score(row({1, 2}), row({3, 4}), *b), ShapeError);
}

TEST(AblationTest, ScoresStayInUnitInterval) {
  Rng rng(5);
  auto b = make_scorer<double>(AblationHeadKind::kEncoderDotProduct, 64);
  b->init(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(64), y(64);
    for (auto& v : x) v = uniform(rng, -20, 20);
    for (auto& v : y) v = uniform(rng, -20, 20);
    const double s = ablation_score(row(x), row(y), *b);
    ASSERT_GE(s, 0.0);
    ASSERT_LE(s, 1.0);
  }
}

std::vector<Image> synth_batch(const ImageDataset& data, std::size_t start, std::size_t count) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(data.image_float((start + i) % data.size()));
  return out;
}

TEST(SupervisedTest, RejectsMissingLabels) {
  Conv4Backbone<float> net;
  LinearProbe<float> classifier(64, 4);
  Sgd<float> opt(net.parameters(), 0.1);
  Rng rng(1);
  const auto data = synth_shapes(8, 4, 16, 1);
  const auto batch = synth_batch(data, 0, 4);
  EXPECT_THROW(supervised_step(batch, {}, net, classifier, opt, supervised_policy(), rng), std::invalid_argument);
  const std::vector<int> short_labels{0, 1};
  EXPECT_THROW(supervised_step(batch, short_labels, net, classifier, opt, supervised_policy(), rng),
               std::invalid_argument);
}

TEST(SupervisedTest, PolicyHasNoColorChanges) {
  const AugmentPolicy p = supervised_policy();
  EXPECT_EQ(p.grayscale_prob, 0.0);
  EXPECT_EQ(p.jitter_prob, 0.0);
  EXPECT_GT(p.flip_prob, 0.0);
}

TEST(RotationTest, TrainingLowersRotationLoss) {
  const auto data = synth_shapes(256, 4, 16, 2);
  Conv4Backbone<float> net;
  net.init_weights(2);
  LinearProbe<float> head(64, 4);
  Rng rng(2);
  head.init(rng);
  NamedTensors<float> params = net.parameters();
  for (auto& p : head.parameters()) params.push_back(p);
  Adam<float> opt(params, {.lr = 1e-3});
  std::vector<double> losses;
  for (std::size_t s = 0; s < 60; ++s) losses.push_back(rotation_step(synth_batch(data, s * 16, 16), net, head, opt).loss);
  const double first = (losses[0] + losses[1] + losses[2]) / 3, last = (losses[57] + losses[58] + losses[59]) / 3;
  EXPECT_LT(last, first);
  const auto images = synth_batch(data, 0, 64);
  const double acc = rotation_accuracy(images, net, head);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}

}  // namespace
}  // namespace relreason
