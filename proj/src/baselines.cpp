#include "relreason/baselines.hpp"

#include <stdexcept>

namespace relreason {

Image rotate90_ccw(const Image& image) {
  Image out(image.width, image.height, image.channels);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(x, image.width - 1 - y, c);
  return out;
}

RotatedBatch rotate_and_label(std::span<const Image> batch) {
  RotatedBatch out;
  out.images.resize(kRotationClasses * batch.size());
  out.labels.resize(out.images.size());
  for (std::size_t m = 0; m < batch.size(); ++m) {
    if (batch[m].height != batch[m].width) {
      throw std::invalid_argument("rotate_and_label: image " + std::to_string(m) + " is " +
                                  std::to_string(batch[m].height) + "x" + std::to_string(batch[m].width) +
                                  ", expected square");
    }
    Image turned = batch[m];
    for (std::size_t r = 0; r < kRotationClasses; ++r) {
      out.images[r * batch.size() + m] = turned;
      out.labels[r * batch.size() + m] = int(r);
      if (r + 1 < kRotationClasses) turned = rotate90_ccw(turned);
    }
  }
  return out;
}

std::string ablation_name(AblationHeadKind kind) {
  switch (kind) {
    case AblationHeadKind::kDotProduct: return "dot_product";
    case AblationHeadKind::kEncoderDotProduct: return "encoder_dot_product";
    case AblationHeadKind::kRelationModule: return "relation_module";
  }
  return "?";
}

template <typename S>
Tensor<S> DotProductScorer<S>::score(const Tensor<S>& z, const PairIndex& index, Mode) {
  return sigmoid(rowwise_dot(gather_rows(z, std::span<const std::size_t>(index.left)),
                             gather_rows(z, std::span<const std::size_t>(index.right))));
}

template <typename S>
Tensor<S> EncoderDotScorer<S>::encode(const Tensor<S>& z, Mode mode) {
  if (z.rank() != 2 || z.dim(1) != encoder_.hidden.in_features()) {
    throw ShapeError("EncoderDotScorer: expected N x " + std::to_string(encoder_.hidden.in_features()) +
                     " representations, got " + shape_str(z.shape()));
  }
  return encoder_(z, mode);
}

template <typename S>
Tensor<S> EncoderDotScorer<S>::score(const Tensor<S>& z, const PairIndex& index, Mode mode) {
  const Tensor<S> g = encode(z, mode);
  return sigmoid(rowwise_dot(gather_rows(g, std::span<const std::size_t>(index.left)),
                             gather_rows(g, std::span<const std::size_t>(index.right))));
}

template <typename S>
std::unique_ptr<PairScorer<S>> make_scorer(AblationHeadKind kind, std::size_t width, AggregationMode mode) {
  switch (kind) {
    case AblationHeadKind::kDotProduct: return std::make_unique<DotProductScorer<S>>();
    case AblationHeadKind::kEncoderDotProduct: return std::make_unique<EncoderDotScorer<S>>(width);
    case AblationHeadKind::kRelationModule: return std::make_unique<RelationHead<S>>(width, mode);
  }
  throw std::logic_error("make_scorer: bad kind");
}

template <typename S>
S ablation_score(const Tensor<S>& zi, const Tensor<S>& zj, PairScorer<S>& scorer, Mode mode) {
  if (zi.shape() != zj.shape() || zi.rank() != 2 || zi.dim(0) != 1) {
    throw ShapeError("ablation_score: expected two 1 x d rows, got " + shape_str(zi.shape()) + " and " +
                     shape_str(zj.shape()));
  }
  PairIndex index;
  index.left = {0};
  index.right = {1};
  index.targets = {1.0f};
  index.provenance = {{0, 1, 0, 0}};
  std::vector<S> rows(zi.data().begin(), zi.data().end());
  rows.insert(rows.end(), zj.data().begin(), zj.data().end());
  return scorer.score(Tensor<S>(Shape{2, zi.dim(1)}, std::move(rows)), index, mode).item();
}

namespace {

double accuracy_of(const Tensor<float>& logits, std::span<const int> labels) {
  const auto predicted = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return labels.empty() ? 0.0 : double(hits) / double(labels.size());
}

}  // namespace

ClassifierStepResult rotation_step(std::span<const Image> batch, Conv4Backbone<float>& backbone,
                                   LinearProbe<float>& head, Optimizer<float>& opt) {
  const RotatedBatch rotated = rotate_and_label(batch);
  const Tensor<float> logits = head(backbone(images_to_tensor<float>(rotated.images), Mode::kTrain));
  Tensor<float> loss = softmax_cross_entropy(logits, std::span<const int>(rotated.labels));
  ClassifierStepResult result{loss.item(), accuracy_of(logits, rotated.labels)};
  opt.zero_grad();
  loss.backward();
  opt.step();
  return result;
}

double rotation_accuracy(std::span<const Image> images, Conv4Backbone<float>& backbone, LinearProbe<float>& head,
                         std::size_t batch_size) {
  NoGradGuard no_grad;
  std::size_t hits = 0, total = 0;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const auto chunk = images.subspan(start, std::min(batch_size, images.size() - start));
    const RotatedBatch rotated = rotate_and_label(chunk);
    const auto predicted = argmax_rows(head(backbone(images_to_tensor<float>(rotated.images), Mode::kEval)));
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == rotated.labels[i];
    total += predicted.size();
  }
  return total == 0 ? 0.0 : double(hits) / double(total);
}

AugmentPolicy supervised_policy() {
  AugmentPolicy policy;
  policy.grayscale_prob = 0.0;
  policy.jitter_prob = 0.0;
  return policy;
}

ClassifierStepResult supervised_step(std::span<const Image> batch, std::span<const int> labels,
                                     Conv4Backbone<float>& backbone, LinearProbe<float>& classifier,
                                     Optimizer<float>& opt, const AugmentPolicy& policy, Rng& rng) {
  if (labels.empty()) throw std::invalid_argument("supervised_step: labels are required");
  if (labels.size() != batch.size()) {
    throw std::invalid_argument("supervised_step: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(batch.size()) + " images");
  }
  const auto views = augment_batch(batch, policy, 1, rng);
  const Tensor<float> logits = classifier(backbone(images_to_tensor<float>(views[0]), Mode::kTrain));
  Tensor<float> loss = softmax_cross_entropy(logits, labels);
  ClassifierStepResult result{loss.item(), accuracy_of(logits, labels)};
  opt.zero_grad();
  loss.backward();
  opt.step();
  return result;
}

#define RELREASON_INSTANTIATE_BASELINES(S)                                                                      \
  template class DotProductScorer<S>;                                                                           \
  template class EncoderDotScorer<S>;                                                                           \
  template std::unique_ptr<PairScorer<S>> make_scorer<S>(AblationHeadKind, std::size_t, AggregationMode);      \
  template S ablation_score(const Tensor<S>&, const Tensor<S>&, PairScorer<S>&, Mode);

RELREASON_INSTANTIATE_BASELINES(float)
RELREASON_INSTANTIATE_BASELINES(double)

}  // namespace relreason
