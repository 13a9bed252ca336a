#include "relreason/relational.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace relreason {

std::string aggregation_name(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::kSum: return "sum";
    case AggregationMode::kMean: return "mean";
    case AggregationMode::kMax: return "max";
    case AggregationMode::kCat: return "cat";
  }
  return "?";
}

AggregationMode parse_aggregation(const std::string& name) {
  for (auto mode : {AggregationMode::kSum, AggregationMode::kMean, AggregationMode::kMax, AggregationMode::kCat}) {
    if (aggregation_name(mode) == name) return mode;
  }
  throw std::invalid_argument("unknown aggregation '" + name + "' (expected sum, mean, max or cat)");
}

std::size_t aggregated_width(std::size_t width, AggregationMode mode) {
  return mode == AggregationMode::kCat ? 2 * width : width;
}

std::vector<double> aggregate(std::span<const double> zi, std::span<const double> zj, AggregationMode mode) {
  if (zi.size() != zj.size()) {
    throw ShapeError("aggregate: widths " + std::to_string(zi.size()) + " and " + std::to_string(zj.size()) +
                     " differ");
  }
  std::vector<double> out;
  out.reserve(aggregated_width(zi.size(), mode));
  for (std::size_t k = 0; k < zi.size(); ++k) {
    switch (mode) {
      case AggregationMode::kSum: out.push_back(zi[k] + zj[k]); break;
      case AggregationMode::kMean: out.push_back(0.5 * (zi[k] + zj[k])); break;
      case AggregationMode::kMax: out.push_back(std::max(zi[k], zj[k])); break;
      case AggregationMode::kCat: out.push_back(zi[k]); break;
    }
  }
  if (mode == AggregationMode::kCat) out.insert(out.end(), zj.begin(), zj.end());
  return out;
}

template <typename S>
Tensor<S> aggregate(const Tensor<S>& zi, const Tensor<S>& zj, AggregationMode mode) {
  if (zi.shape() != zj.shape() || zi.rank() != 2) {
    throw ShapeError("aggregate: operands " + shape_str(zi.shape()) + " and " + shape_str(zj.shape()) +
                     " must be equal-shaped P x d");
  }
  switch (mode) {
    case AggregationMode::kSum: return add(zi, zj);
    case AggregationMode::kMean: return scale(add(zi, zj), S(0.5));
    case AggregationMode::kMax: return maximum(zi, zj);
    case AggregationMode::kCat: return concat<S>({zi, zj});
  }
  throw std::logic_error("aggregate: bad mode");
}

std::vector<std::size_t> derangement_shuffle(std::size_t m_count, Rng& rng) {
  if (m_count < 2) throw std::invalid_argument("derangement_shuffle: need at least 2 instances");
  std::vector<std::size_t> out(m_count);
  std::uniform_int_distribution<std::size_t> pick(0, m_count - 2);
  for (std::size_t m = 0; m < m_count; ++m) {
    const std::size_t r = pick(rng);
    out[m] = r >= m ? r + 1 : r;
  }
  return out;
}

PairIndex make_pair_index(std::size_t instances, std::size_t views, Rng& rng, const PairLabels* labels) {
  if (views < 2) throw std::invalid_argument("make_pair_index: need at least 2 views");
  if (instances < 2) throw std::invalid_argument("make_pair_index: need at least 2 instances");
  if (labels && labels->labels.size() != instances) {
    throw std::invalid_argument("make_pair_index: " + std::to_string(labels->labels.size()) + " labels for " +
                                std::to_string(instances) + " instances");
  }
  const std::size_t M = instances;
  // Same-class labeled partners per instance.
  std::vector<std::vector<std::size_t>> mates(M);
  if (labels) {
    for (std::size_t a = 0; a < M; ++a) {
      if (labels->labels[a] < 0) continue;
      for (std::size_t b = 0; b < M; ++b) {
        if (b != a && labels->labels[b] == labels->labels[a]) mates[a].push_back(b);
      }
    }
  }
  const auto collides = [&](std::size_t a, std::size_t b) {
    return labels && labels->avoid_negative_collisions && labels->labels[a] >= 0 &&
           labels->labels[a] == labels->labels[b];
  };

  PairIndex index;
  const std::size_t total = M * (views * views - views);
  index.left.reserve(total);
  index.right.reserve(total);
  index.targets.reserve(total);
  index.provenance.reserve(total);
  const auto emit = [&](std::size_t i, std::size_t j, std::size_t n, std::size_t n_prime, float t) {
    index.left.push_back(i * M + n);
    index.right.push_back(j * M + n_prime);
    index.targets.push_back(t);
    index.provenance.push_back({i, j, n, n_prime});
  };

  for (std::size_t i = 0; i < views; ++i) {
    for (std::size_t j = i + 1; j < views; ++j) {
      for (std::size_t n = 0; n < M; ++n) {
        std::size_t partner = n;
        if (!mates[n].empty()) {
          std::uniform_int_distribution<std::size_t> pick(0, mates[n].size() - 1);
          partner = mates[n][pick(rng)];
        }
        emit(i, j, n, partner, 1.0f);
      }
      auto shuffled = derangement_shuffle(M, rng);
      for (std::size_t n = 0; n < M; ++n) {
        if (collides(n, shuffled[n])) {
          std::vector<std::size_t> safe;
          for (std::size_t b = 0; b < M; ++b) {
            if (b != n && !collides(n, b)) safe.push_back(b);
          }
          if (!safe.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, safe.size() - 1);
            shuffled[n] = safe[pick(rng)];
          }
        }
        emit(i, j, n, shuffled[n], 0.0f);
      }
    }
  }
  return index;
}

template <typename S>
PairSet<S> gather_pairs(const Tensor<S>& z, const PairIndex& index, AggregationMode mode) {
  if (z.rank() != 2) throw ShapeError("gather_pairs: expected stacked 2-D representations, got " + shape_str(z.shape()));
  PairSet<S> out;
  out.features = aggregate(gather_rows(z, std::span<const std::size_t>(index.left)),
                           gather_rows(z, std::span<const std::size_t>(index.right)), mode);
  out.targets.assign(index.targets.begin(), index.targets.end());
  out.provenance = index.provenance;
  return out;
}

template <typename S>
PairSet<S> build_pairs(const Tensor<S>& z, std::size_t views, AggregationMode mode, Rng& rng,
                       const PairLabels* labels) {
  if (z.rank() != 2 || views == 0 || z.dim(0) % views != 0) {
    throw ShapeError("build_pairs: " + shape_str(z.shape()) + " is not " + std::to_string(views) +
                     " stacked view batches");
  }
  return gather_pairs(z, make_pair_index(z.dim(0) / views, views, rng, labels), mode);
}

template <typename S>
std::vector<S> focal_weights(std::span<const S> y, std::span<const S> targets, double gamma) {
  if (gamma < 0.0) throw std::invalid_argument("focal_bce: gamma must be >= 0, got " + std::to_string(gamma));
  if (y.size() != targets.size()) {
    throw ShapeError("focal_weights: " + std::to_string(y.size()) + " scores for " + std::to_string(targets.size()) +
                     " targets");
  }
  std::vector<S> w(y.size());
  for (std::size_t p = 0; p < y.size(); ++p) {
    const double t = targets[p];
    const double yc = std::clamp(double(y[p]), kScoreClamp, 1.0 - kScoreClamp);
    w[p] = S(0.5 * std::pow((1.0 - t) * yc + t * (1.0 - yc), gamma));
  }
  return w;
}

template <typename S>
Tensor<S> weighted_bce(const Tensor<S>& y, std::span<const S> targets, std::span<const S> weights) {
  if (y.size() != targets.size() || y.size() != weights.size()) {
    throw ShapeError("weighted_bce: " + std::to_string(y.size()) + " scores, " + std::to_string(targets.size()) +
                     " targets, " + std::to_string(weights.size()) + " weights");
  }
  const std::size_t P = y.size();
  std::vector<S> dloss(P);
  double total = 0.0;
  const auto yd = y.data();
  for (std::size_t p = 0; p < P; ++p) {
    const double t = targets[p], w = weights[p], raw = yd[p];
    const double yc = std::clamp(raw, kScoreClamp, 1.0 - kScoreClamp);
    total += -w * (t * std::log(yc) + (1.0 - t) * std::log(1.0 - yc));
    const bool inside = raw > kScoreClamp && raw < 1.0 - kScoreClamp;
    dloss[p] = inside ? S(-w * (t / yc - (1.0 - t) / (1.0 - yc)) / double(P)) : S(0);
  }
  return Tensor<S>::make_result(Shape{1}, {S(total / double(P))}, {y}, "weighted_bce",
                                [dloss = std::move(dloss)](detail::Node<S>& self) {
                                  auto& in = *self.inputs[0];
                                  if (!in.requires_grad) return;
                                  auto g = in.grad_buffer();
                                  const S upstream = self.grad[0];
                                  for (std::size_t p = 0; p < dloss.size(); ++p) g[p] += upstream * dloss[p];
                                });
}

template <typename S>
Tensor<S> focal_bce(const Tensor<S>& y, std::span<const S> targets, double gamma) {
  const std::vector<S> w = focal_weights(y.data(), targets, gamma);
  return weighted_bce(y, targets, std::span<const S>(w));
}

template <typename S>
double pair_accuracy(const Tensor<S>& y, std::span<const S> targets) {
  if (targets.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t p = 0; p < targets.size(); ++p) hits += (y.data()[p] >= S(0.5)) == (targets[p] >= S(0.5));
  return double(hits) / double(targets.size());
}

Tensor<float> stack_views(const std::vector<std::vector<Image>>& views) {
  std::vector<Image> flat;
  for (const auto& v : views) flat.insert(flat.end(), v.begin(), v.end());
  return images_to_tensor<float>(flat);
}

StepResult relational_step(std::span<const Image> batch, Conv4Backbone<float>& backbone, PairScorer<float>& scorer,
                           Optimizer<float>& backbone_opt, Optimizer<float>& scorer_opt,
                           const RelationalStepOptions& opts, Rng& rng) {
  const auto views = augment_batch(batch, opts.policy, opts.views, rng);
  const Tensor<float> z = backbone(stack_views(views), Mode::kTrain);
  const PairIndex index = make_pair_index(batch.size(), opts.views, rng, opts.labels);
  const Tensor<float> y = scorer.score(z, index, Mode::kTrain);
  Tensor<float> loss = focal_bce(y, std::span<const float>(index.targets), opts.gamma);

  StepResult result;
  result.loss = loss.item();
  result.pair_accuracy = pair_accuracy(y, std::span<const float>(index.targets));
  result.pairs = index.size();

  backbone_opt.zero_grad();
  scorer_opt.zero_grad();
  loss.backward();
  backbone_opt.step();
  scorer_opt.step();
  return result;
}

#define RELREASON_INSTANTIATE_RELATIONAL(S)                                                                  \
  template Tensor<S> aggregate(const Tensor<S>&, const Tensor<S>&, AggregationMode);                       \
  template PairSet<S> gather_pairs(const Tensor<S>&, const PairIndex&, AggregationMode);                   \
  template PairSet<S> build_pairs(const Tensor<S>&, std::size_t, AggregationMode, Rng&, const PairLabels*); \
  template std::vector<S> focal_weights(std::span<const S>, std::span<const S>, double);                   \
  template Tensor<S> weighted_bce(const Tensor<S>&, std::span<const S>, std::span<const S>);             \
  template Tensor<S> focal_bce(const Tensor<S>&, std::span<const S>, double);                              \
  template double pair_accuracy(const Tensor<S>&, std::span<const S>);

RELREASON_INSTANTIATE_RELATIONAL(float)
RELREASON_INSTANTIATE_RELATIONAL(double)

}  // namespace relreason
