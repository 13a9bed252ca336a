#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relreason/backbone.hpp"
#include "relreason/dataio.hpp"

namespace relreason {

/// Inference-mode backbone outputs, one row per image.
MatrixX<double> extract_features(Conv4Backbone<float>& backbone, const ImageDataset& data,
                                 std::size_t batch_size = 256);

/// FNV-1a over the raw bytes of every tensor, in order.
std::uint64_t checksum(const NamedTensors<float>& tensors);

struct ProbeOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  /// Standardize features with training-set mean and deviation.
  bool standardize = true;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<int> test_predictions;
};

/// Softmax linear classifier trained with momentum SGD on fixed features,
/// learning rate divided by 10 at 50% and 75% of the epochs.
ProbeResult train_linear_probe(const MatrixX<double>& train, std::span<const int> train_labels,
                               const MatrixX<double>& test, std::span<const int> test_labels,
                               std::size_t num_classes, const ProbeOptions& options);

/// Linear evaluation of a frozen backbone. Throws std::invalid_argument when
/// the label spaces differ and std::logic_error if the backbone changed.
ProbeResult linear_eval(Conv4Backbone<float>& backbone, const ImageDataset& train, const ImageDataset& test,
                        const ProbeOptions& options);

struct RetrievalResult {
  std::vector<std::vector<std::size_t>> neighbors;  // per query, ascending distance
  double accuracy = 0.0;
  /// Row q, column c: fraction of class-q queries' retrievals in class c.
  /// Rows of classes with no queries are zero.
  std::vector<std::vector<double>> confusion;
};

/// k nearest gallery rows per query by Euclidean distance, ties broken by
/// gallery index. With `queries_in_gallery`, query i is gallery row i and is
/// excluded from its own neighbors.
RetrievalResult knn_retrieval(const MatrixX<double>& queries, std::span<const int> query_labels,
                              const MatrixX<double>& gallery, std::span<const int> gallery_labels, std::size_t k,
                              bool queries_in_gallery);

/// Row-normalized confusion of predictions against truth.
std::vector<std::vector<double>> confusion_matrix(std::span<const int> truth, std::span<const int> predicted,
                                                  std::size_t num_classes);

}  // namespace relreason
