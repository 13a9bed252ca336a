#include "relreason/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "relreason/optim.hpp"

namespace relreason {

MatrixX<double> extract_features(Conv4Backbone<float>& backbone, const ImageDataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  MatrixX<double> out(data.size(), kRepresentationWidth);
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    indices.resize(std::min(batch_size, data.size() - start));
    std::iota(indices.begin(), indices.end(), start);
    const auto images = data.images_float(indices);
    const Tensor<float> z = backbone(images_to_tensor<float>(images), Mode::kEval);
    out.middleRows(start, indices.size()) = z.matrix().cast<double>();
  }
  return out;
}

std::uint64_t checksum(const NamedTensors<float>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.tensor.data().data());
    for (std::size_t i = 0; i < t.tensor.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 0x100000001b3ULL;
  }
  return h;
}

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t num_classes, const char* what) {
  if (labels.size() != rows) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || std::size_t(l) >= num_classes) {
      throw std::invalid_argument(std::string(what) + ": label " + std::to_string(l) + " outside 0.." +
                                  std::to_string(num_classes - 1));
    }
  }
}

std::vector<int> predict(LinearProbe<float>& probe, const MatrixX<float>& x) {
  NoGradGuard no_grad;
  Tensor<float> input(Shape{std::size_t(x.rows()), std::size_t(x.cols())});
  input.matrix() = x;
  return argmax_rows(probe(input));
}

double accuracy(std::span<const int> truth, std::span<const int> predicted) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i];
  return truth.empty() ? 0.0 : double(hits) / double(truth.size());
}

}  // namespace

ProbeResult train_linear_probe(const MatrixX<double>& train, std::span<const int> train_labels,
                               const MatrixX<double>& test, std::span<const int> test_labels,
                               std::size_t num_classes, const ProbeOptions& options) {
  if (train.cols() != test.cols()) {
    throw ShapeError("train_linear_probe: train width " + std::to_string(train.cols()) + " vs test width " +
                     std::to_string(test.cols()));
  }
  if (train.rows() == 0) throw std::invalid_argument("train_linear_probe: empty training set");
  if (options.batch_size == 0) throw std::invalid_argument("train_linear_probe: batch_size must be positive");
  check_labels(train_labels, train.rows(), num_classes, "train_linear_probe (train)");
  check_labels(test_labels, test.rows(), num_classes, "train_linear_probe (test)");

  const std::size_t n = train.rows(), d = train.cols();
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d), inv_std = Eigen::RowVectorXd::Ones(d);
  if (options.standardize) {
    mean = train.colwise().mean();
    const Eigen::RowVectorXd var = (train.rowwise() - mean).array().square().colwise().mean();
    inv_std = (var.array() + 1e-8).rsqrt().matrix();
  }
  const auto normalize = [&](const MatrixX<double>& x) -> MatrixX<float> {
    return ((x.rowwise() - mean).array().rowwise() * inv_std.array()).matrix().cast<float>();
  };
  const MatrixX<float> xtrain = normalize(train), xtest = normalize(test);

  Rng rng(derive_seed({options.seed, 0x9208EULL}));
  LinearProbe<float> probe(d, num_classes);
  probe.init(rng);
  Sgd<float> opt(probe.parameters(), options.lr, options.momentum);

  std::vector<std::size_t> order(n);
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    opt.set_lr(step_schedule(options.lr, epoch, options.epochs));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      const std::size_t count = std::min(options.batch_size, n - start);
      Tensor<float> x(Shape{count, d});
      auto xm = x.matrix();
      batch_labels.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        xm.row(i) = xtrain.row(order[start + i]);
        batch_labels[i] = train_labels[order[start + i]];
      }
      Tensor<float> loss = softmax_cross_entropy(probe(x), std::span<const int>(batch_labels));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }

  ProbeResult result;
  result.train_accuracy = accuracy(train_labels, predict(probe, xtrain));
  result.test_predictions = predict(probe, xtest);
  result.test_accuracy = accuracy(test_labels, result.test_predictions);
  return result;
}

ProbeResult linear_eval(Conv4Backbone<float>& backbone, const ImageDataset& train, const ImageDataset& test,
                        const ProbeOptions& options) {
  if (!train.labeled() || !test.labeled()) throw std::invalid_argument("linear_eval: datasets must be labeled");
  if (train.num_classes() != test.num_classes()) {
    throw std::invalid_argument("linear_eval: train has " + std::to_string(train.num_classes()) +
                                " classes but test has " + std::to_string(test.num_classes()));
  }
  NamedTensors<float> frozen = backbone.parameters();
  const auto buffers = backbone.buffers();
  frozen.insert(frozen.end(), buffers.begin(), buffers.end());
  const std::uint64_t before = checksum(frozen);

  const MatrixX<double> ftrain = extract_features(backbone, train), ftest = extract_features(backbone, test);
  ProbeResult result = train_linear_probe(ftrain, train.labels, ftest, test.labels, train.num_classes(), options);

  if (checksum(frozen) != before) throw std::logic_error("linear_eval: backbone changed during evaluation");
  return result;
}

RetrievalResult knn_retrieval(const MatrixX<double>& queries, std::span<const int> query_labels,
                              const MatrixX<double>& gallery, std::span<const int> gallery_labels, std::size_t k,
                              bool queries_in_gallery) {
  if (queries.cols() != gallery.cols()) {
    throw ShapeError("knn_retrieval: query width " + std::to_string(queries.cols()) + " vs gallery width " +
                     std::to_string(gallery.cols()));
  }
  if (query_labels.size() != std::size_t(queries.rows()) || gallery_labels.size() != std::size_t(gallery.rows())) {
    throw std::invalid_argument("knn_retrieval: label counts do not match row counts");
  }
  if (queries_in_gallery && queries.rows() > gallery.rows()) {
    throw std::invalid_argument("knn_retrieval: more queries than gallery rows");
  }
  const std::size_t available = gallery.rows() - (queries_in_gallery ? 1 : 0);
  if (k == 0 || k > available) {
    throw std::invalid_argument("knn_retrieval: k = " + std::to_string(k) + " but only " + std::to_string(available) +
                                " gallery entries are available");
  }
  int max_label = -1;
  for (int l : query_labels) max_label = std::max(max_label, l);
  for (int l : gallery_labels) max_label = std::max(max_label, l);
  const std::size_t classes = std::size_t(max_label + 1);

  RetrievalResult result;
  result.neighbors.resize(queries.rows());
  std::vector<std::vector<double>> counts(classes, std::vector<double>(classes, 0.0));
  // (squared distance, gallery index); pair ordering gives the index tie-break.
  std::vector<std::pair<double, std::size_t>> ranked;
  double hit_fraction = 0.0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    ranked.clear();
    for (Eigen::Index g = 0; g < gallery.rows(); ++g) {
      if (queries_in_gallery && g == q) continue;
      double sq = 0.0;
      for (Eigen::Index c = 0; c < gallery.cols(); ++c) {
        const double diff = gallery(g, c) - queries(q, c);
        sq += diff * diff;
      }
      ranked.push_back({sq, std::size_t(g)});
    }
    std::partial_sort(ranked.begin(), ranked.begin() + k, ranked.end());
    std::size_t hits = 0;
    auto& mine = result.neighbors[q];
    for (std::size_t r = 0; r < k; ++r) {
      mine.push_back(ranked[r].second);
      const int label = gallery_labels[ranked[r].second];
      hits += label == query_labels[q];
      counts[query_labels[q]][label] += 1.0;
    }
    hit_fraction += double(hits) / double(k);
  }
  result.accuracy = queries.rows() == 0 ? 0.0 : hit_fraction / double(queries.rows());
  for (auto& row : counts) {
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    if (total > 0) for (auto& v : row) v /= total;
  }
  result.confusion = std::move(counts);
  return result;
}

std::vector<std::vector<double>> confusion_matrix(std::span<const int> truth, std::span<const int> predicted,
                                                  std::size_t num_classes) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("confusion_matrix: length mismatch");
  std::vector<std::vector<double>> out(num_classes, std::vector<double>(num_classes, 0.0));
  for (std::size_t i = 0; i < truth.size(); ++i) out.at(truth[i]).at(predicted[i]) += 1.0;
  for (auto& row : out) {
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    if (total > 0) for (auto& v : row) v /= total;
  }
  return out;
}

}  // namespace relreason
