#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relreason/relational.hpp"

namespace relreason {

/// Rotates an image 90 degrees counter-clockwise by index remapping:
/// out(y, x) = in(x, W - 1 - y). Works for any size; the output is W x H.
Image rotate90_ccw(const Image& image);

struct RotatedBatch {
  std::vector<Image> images;  // rotation-major: entry r * M + m is image m turned r quarter turns
  std::vector<int> labels;    // r
};

/// Every image at 0, 90, 180 and 270 degrees counter-clockwise, labeled
/// 0..3. Rejects non-square images.
RotatedBatch rotate_and_label(std::span<const Image> batch);

inline constexpr std::size_t kRotationClasses = 4;

enum class AblationHeadKind { kDotProduct, kEncoderDotProduct, kRelationModule };

std::string ablation_name(AblationHeadKind kind);

/// (a): y = sigmoid(<zi, zj>). No parameters.
template <typename S>
class DotProductScorer final : public PairScorer<S> {
 public:
  void init(std::uint64_t) override {}
  Tensor<S> score(const Tensor<S>& z, const PairIndex& index, Mode) override;
  NamedTensors<S> parameters() const override { return {}; }
  NamedTensors<S> buffers() const override { return {}; }
};

inline constexpr std::size_t kEncoderHidden = 256;

/// (b): y = sigmoid(<g(zi), g(zj)>) with g a 64 -> 256 -> 64 Mlp. g encodes
/// every stacked representation row once, then pairs are gathered.
template <typename S>
class EncoderDotScorer final : public PairScorer<S> {
 public:
  explicit EncoderDotScorer(std::size_t width) : encoder_(width, kEncoderHidden, width) {}

  void init(std::uint64_t seed) override {
    Rng rng(derive_seed({seed, 0xE2C0DEULL}));
    encoder_.init(rng);
  }
  Tensor<S> encode(const Tensor<S>& z, Mode mode);
  Tensor<S> score(const Tensor<S>& z, const PairIndex& index, Mode mode) override;
  NamedTensors<S> parameters() const override {
    NamedTensors<S> out;
    encoder_.collect("encoder", out);
    return out;
  }
  NamedTensors<S> buffers() const override {
    NamedTensors<S> out;
    encoder_.collect_buffers("encoder", out);
    return out;
  }

 private:
  Mlp<S> encoder_;
};

/// Relation module with concatenation for kRelationModule unless `mode`
/// says otherwise.
template <typename S>
std::unique_ptr<PairScorer<S>> make_scorer(AblationHeadKind kind, std::size_t width,
                                           AggregationMode mode = AggregationMode::kCat);

/// Single-pair score; zi and zj are 1 x d.
template <typename S>
S ablation_score(const Tensor<S>& zi, const Tensor<S>& zj, PairScorer<S>& scorer, Mode mode = Mode::kEval);

struct ClassifierStepResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Rotation pretext step: four rotations of the batch, cross-entropy over
/// the rotation label, one update of backbone and rotation head.
ClassifierStepResult rotation_step(std::span<const Image> batch, Conv4Backbone<float>& backbone,
                                   LinearProbe<float>& head, Optimizer<float>& opt);

/// Fraction of correctly predicted rotations over all four rotations of
/// `images`, in inference mode.
double rotation_accuracy(std::span<const Image> images, Conv4Backbone<float>& backbone, LinearProbe<float>& head,
                         std::size_t batch_size = 256);

/// Flip + crop, no color changes.
AugmentPolicy supervised_policy();

/// Supervised step: one augmented view per image, cross-entropy on labels,
/// joint update of backbone and classifier.
ClassifierStepResult supervised_step(std::span<const Image> batch, std::span<const int> labels,
                                     Conv4Backbone<float>& backbone, LinearProbe<float>& classifier,
                                     Optimizer<float>& opt, const AugmentPolicy& policy, Rng& rng);

}  // namespace relreason
