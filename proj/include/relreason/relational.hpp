#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relreason/augment.hpp"
#include "relreason/backbone.hpp"
#include "relreason/layers.hpp"
#include "relreason/optim.hpp"

namespace relreason {

enum class AggregationMode { kSum, kMean, kMax, kCat };

std::string aggregation_name(AggregationMode mode);
/// Accepts "sum", "mean", "max", "cat"; throws std::invalid_argument otherwise.
AggregationMode parse_aggregation(const std::string& name);
std::size_t aggregated_width(std::size_t width, AggregationMode mode);

/// Elementwise sum / mean / max, or concatenation (zi, zj).
std::vector<double> aggregate(std::span<const double> zi, std::span<const double> zj, AggregationMode mode);

/// Row-wise aggregation of two P x d tensors.
template <typename S>
Tensor<S> aggregate(const Tensor<S>& zi, const Tensor<S>& zj, AggregationMode mode);

/// For every m draws a partner uniformly from {0..M-1} \ {m}, independently
/// per position, so partners may repeat across positions.
std::vector<std::size_t> derangement_shuffle(std::size_t m_count, Rng& rng);

/// Indices (views i, j; instances n, n') that produced a pair.
struct PairProvenance {
  std::size_t i = 0, j = 0, n = 0, n_prime = 0;
  bool operator==(const PairProvenance&) const = default;
};

/// Optional labels for semi-supervised pairing. labels[m] < 0 marks an
/// unlabeled instance.
struct PairLabels {
  std::vector<int> labels;
  bool avoid_negative_collisions = false;
};

/// Which rows of the stacked representation matrix form each pair. Rows are
/// view-major: row k * M + m holds instance m under view k.
struct PairIndex {
  std::vector<std::size_t> left, right;
  std::vector<float> targets;
  std::vector<PairProvenance> provenance;

  std::size_t size() const { return targets.size(); }
};

/// Pair layout for M instances under K views. For each view pair i < j:
/// M positives (n under i, n under j), then M negatives (n under i,
/// partner from derangement_shuffle under j). With labels, every labeled
/// positive slot whose class has another labeled member in the batch is
/// re-pointed to a uniformly chosen same-class instance, keeping P fixed.
PairIndex make_pair_index(std::size_t instances, std::size_t views, Rng& rng, const PairLabels* labels = nullptr);

template <typename S>
struct PairSet {
  Tensor<S> features;  // P x d'
  std::vector<S> targets;
  std::vector<PairProvenance> provenance;

  std::size_t size() const { return targets.size(); }
};

/// z: stacked (K * M) x d representations, view-major.
template <typename S>
PairSet<S> build_pairs(const Tensor<S>& z, std::size_t views, AggregationMode mode, Rng& rng,
                       const PairLabels* labels = nullptr);
template <typename S>
PairSet<S> gather_pairs(const Tensor<S>& z, const PairIndex& index, AggregationMode mode);

/// Scores every pair of a PairIndex against a stacked representation matrix.
/// Implemented by the relation module and the head ablations.
template <typename S>
class PairScorer {
 public:
  virtual ~PairScorer() = default;
  virtual void init(std::uint64_t seed) = 0;
  /// Returns P x 1 scores in [0, 1].
  virtual Tensor<S> score(const Tensor<S>& z, const PairIndex& index, Mode mode) = 0;
  virtual NamedTensors<S> parameters() const = 0;
  virtual NamedTensors<S> buffers() const = 0;
};

inline constexpr std::size_t kRelationHidden = 256;

/// linear(d' -> 256) -> batch-norm -> leaky-ReLU -> linear(256 -> 1) -> sigmoid.
template <typename S>
class RelationHead final : public PairScorer<S> {
 public:
  RelationHead(std::size_t width, AggregationMode mode)
      : mode_(mode), mlp_(aggregated_width(width, mode), kRelationHidden, 1) {}

  /// Fan-in uniform weights, zero biases.
  void init(std::uint64_t seed) override {
    Rng rng(derive_seed({seed, 0x4EADULL}));
    mlp_.init(rng);
  }

  std::size_t input_width() const { return mlp_.hidden.in_features(); }
  AggregationMode mode() const { return mode_; }

  /// features: P x d'. Returns P x 1.
  Tensor<S> operator()(const Tensor<S>& features, Mode mode) {
    if (features.rank() != 2 || features.dim(1) != input_width()) {
      throw ShapeError("RelationHead: expected P x " + std::to_string(input_width()) + " features, got " +
                       shape_str(features.shape()));
    }
    return sigmoid(mlp_(features, mode));
  }

  Tensor<S> score(const Tensor<S>& z, const PairIndex& index, Mode mode) override {
    return (*this)(gather_pairs(z, index, mode_).features, mode);
  }

  NamedTensors<S> parameters() const override {
    NamedTensors<S> out;
    mlp_.collect("head", out);
    return out;
  }
  NamedTensors<S> buffers() const override {
    NamedTensors<S> out;
    mlp_.collect_buffers("head", out);
    return out;
  }

 private:
  AggregationMode mode_;
  Mlp<S> mlp_;
};

template <typename S>
Tensor<S> relation_score(const PairSet<S>& pairs, RelationHead<S>& head, Mode mode) {
  return head(pairs.features, mode);
}

inline constexpr double kScoreClamp = 1e-7;

/// w_p = 0.5 * ((1 - t) y + t (1 - y))^gamma with y clamped to
/// [1e-7, 1 - 1e-7].
template <typename S>
std::vector<S> focal_weights(std::span<const S> y, std::span<const S> targets, double gamma);

/// (1/P) sum_p -w_p [t log y + (1 - t) log(1 - y)] with constant weights.
template <typename S>
Tensor<S> weighted_bce(const Tensor<S>& y, std::span<const S> targets, std::span<const S> weights);

/// (1/P) sum_p -w_p [t log y + (1 - t) log(1 - y)], with
/// w_p = 0.5 * ((1 - t) y + t (1 - y))^gamma held constant under
/// differentiation. y is clamped to [1e-7, 1 - 1e-7] first.
template <typename S>
Tensor<S> focal_bce(const Tensor<S>& y, std::span<const S> targets, double gamma);

/// Fraction of pairs with round(y) == t.
template <typename S>
double pair_accuracy(const Tensor<S>& y, std::span<const S> targets);

struct RelationalStepOptions {
  std::size_t views = 4;
  double gamma = 2.0;
  AugmentPolicy policy;
  const PairLabels* labels = nullptr;
};

struct StepResult {
  double loss = 0.0;
  double pair_accuracy = 0.0;
  std::size_t pairs = 0;
};

/// One iteration of relational training: K augmentations of the batch, one
/// backbone forward over all views, pair construction, scoring, focal loss,
/// backward, then an update of the backbone followed by the scorer.
StepResult relational_step(std::span<const Image> batch, Conv4Backbone<float>& backbone, PairScorer<float>& scorer,
                           Optimizer<float>& backbone_opt, Optimizer<float>& scorer_opt,
                           const RelationalStepOptions& opts, Rng& rng);

/// Stacks K view batches (each M images) view-major into (K * M) x 3 x H x W.
Tensor<float> stack_views(const std::vector<std::vector<Image>>& views);

}  // namespace relreason
