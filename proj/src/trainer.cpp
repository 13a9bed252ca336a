#include "relreason/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace relreason {

namespace {

ImageDataset gray_to_rgb(const ImageDataset& data) {
  if (data.channels != 1) return data;
  ImageDataset out = data;
  out.channels = 3;
  out.pixels.resize(data.pixels.size() * 3);
  for (std::size_t i = 0; i < data.pixels.size(); ++i) {
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = data.pixels[i];
  }
  return out;
}

bool pair_method(Method m) {
  return m == Method::kRelational || m == Method::kAblationA || m == Method::kAblationB;
}

void append(NamedTensors<float>& out, const NamedTensors<float>& more, const std::string& prefix = "") {
  for (const auto& t : more) out.push_back({prefix + t.name, t.tensor});
}

std::string format_row(std::size_t epoch, std::size_t step, double loss, const std::optional<double>& pair_acc,
                       double lr, const std::optional<double>& elapsed) {
  char buf[256];
  char acc[32] = "", secs[32] = "";
  if (pair_acc) std::snprintf(acc, sizeof acc, "%.6f", *pair_acc);
  if (elapsed) std::snprintf(secs, sizeof secs, "%.3f", *elapsed);
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%s,%.9g,%s\n", epoch, step, loss, acc, lr, secs);
  return buf;
}

}  // namespace

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({seed, epoch, 0x9E12ULL}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Datasets load_datasets(const TrainConfig& config) {
  config.validate();
  Datasets out;
  switch (config.dataset) {
    case DatasetKind::kSynth: {
      auto split = split_train_test(
          synth_shapes(config.synth_n, config.synth_classes, config.synth_size, config.synth_seed), config.synth_seed);
      out.train = std::move(split.train);
      out.test = std::move(split.test);
      break;
    }
    case DatasetKind::kCifar10: {
      const std::filesystem::path dir(config.data_dir);
      std::vector<std::filesystem::path> train_files;
      for (int b = 1; b <= 5; ++b) {
        const auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
        if (std::filesystem::exists(p)) train_files.push_back(p);
      }
      std::filesystem::path test_file = dir / "test_batch.bin";
      if (train_files.empty()) {
        train_files.push_back(dir / "train.bin");
        test_file = dir / "test.bin";
      }
      out.train = load_cifar_format(train_files, config.image_size, config.num_classes);
      out.test = load_cifar_format(std::span(&test_file, 1), config.image_size, config.num_classes);
      break;
    }
    case DatasetKind::kIdx:
      out.train = gray_to_rgb(load_idx(config.train_images, config.train_labels));
      out.test = gray_to_rgb(load_idx(config.test_images, config.test_labels));
      break;
  }
  if (out.train.channels != 3) throw DataError("channels", "training images must be RGB or grayscale");
  return out;
}

Model::Model(const TrainConfig& config, std::size_t num_classes) {
  backbone.init_weights(config.seed);
  switch (config.method) {
    case Method::kRelational:
      scorer = make_scorer<float>(AblationHeadKind::kRelationModule, kRepresentationWidth, config.aggregation);
      break;
    case Method::kAblationA:
      scorer = make_scorer<float>(AblationHeadKind::kDotProduct, kRepresentationWidth);
      break;
    case Method::kAblationB:
      scorer = make_scorer<float>(AblationHeadKind::kEncoderDotProduct, kRepresentationWidth);
      break;
    case Method::kRotation:
      classifier = std::make_unique<LinearProbe<float>>(kRepresentationWidth, kRotationClasses);
      break;
    case Method::kSupervised:
      classifier = std::make_unique<LinearProbe<float>>(kRepresentationWidth, num_classes);
      break;
    case Method::kRandom:
      break;
  }
  if (scorer) scorer->init(config.seed);
  if (classifier) {
    Rng rng(derive_seed({config.seed, 0xC1A55ULL}));
    classifier->init(rng);
  }
}

NamedTensors<float> Model::tensors() const {
  NamedTensors<float> out = backbone.parameters();
  append(out, backbone.buffers());
  if (scorer) {
    append(out, scorer->parameters());
    append(out, scorer->buffers());
  }
  if (classifier) append(out, classifier->parameters("classifier"));
  return out;
}

void restore_model(Model& model, const Checkpoint& checkpoint) {
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto& t : checkpoint.tensors) stored[t.name] = &t.tensor;
  for (auto& t : model.tensors()) {
    const auto it = stored.find(t.name);
    if (it == stored.end()) throw DataError("architecture", "checkpoint has no tensor " + t.name);
    if (it->second->shape() != t.tensor.shape()) {
      throw DataError("architecture", t.name + " is " + shape_str(it->second->shape()) + " in the checkpoint but " +
                                          shape_str(t.tensor.shape()) + " in the model");
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.tensor.data().begin());
  }
}

TrainResult train(const TrainConfig& config, const Datasets& data, const TrainHooks& hooks) {
  config.validate();
  const ImageDataset& train_set = data.train;
  if (config.method == Method::kSupervised && !train_set.labeled()) {
    throw ConfigError("method", "supervised training needs a labeled training set");
  }
  const std::size_t n = train_set.size();
  const std::size_t M = config.batch_size;
  const std::size_t steps_per_epoch = n / M;  // drop-last
  if (config.method != Method::kRandom && config.epochs > 0 && steps_per_epoch == 0) {
    throw ConfigError("batch_size", std::to_string(M) + " exceeds the " + std::to_string(n) + " training images");
  }

  TrainResult result;
  result.model = std::make_unique<Model>(config, train_set.labeled() ? train_set.num_classes() : 0);
  Model& model = *result.model;

  std::vector<std::pair<std::string, std::unique_ptr<Optimizer<float>>>> optimizers;
  if (pair_method(config.method)) {
    optimizers.emplace_back("optimizer.backbone.",
                            std::make_unique<Adam<float>>(model.backbone.parameters(), AdamOptions{.lr = config.lr_backbone}));
    optimizers.emplace_back("optimizer.head.",
                            std::make_unique<Adam<float>>(model.scorer->parameters(), AdamOptions{.lr = config.lr_head}));
  } else if (config.method == Method::kRotation || config.method == Method::kSupervised) {
    NamedTensors<float> params = model.backbone.parameters();
    append(params, model.classifier->parameters("classifier"));
    if (config.method == Method::kRotation) {
      optimizers.emplace_back("optimizer.", std::make_unique<Adam<float>>(params, AdamOptions{.lr = config.lr_backbone}));
    } else {
      optimizers.emplace_back("optimizer.", std::make_unique<Sgd<float>>(params, config.supervised_lr, 0.9));
    }
  }

  const auto snapshot = [&] {
    Checkpoint c;
    c.tensors = model.tensors();
    for (const auto& [prefix, opt] : optimizers) append(c.tensors, opt->state(), prefix);
    c.config = config.model_text();
    return c;
  };

  const std::filesystem::path out_dir(config.out_dir);
  std::ofstream metrics;
  if (hooks.write_files) {
    std::filesystem::create_directories(out_dir);
    metrics.open(out_dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics) throw DataError("path", "cannot open " + (out_dir / "metrics.csv").string() + " for writing");
    metrics << "epoch,step,loss,pair_acc,lr,elapsed_s\n";
  }

  // Semi-supervised: a seeded subset of training instances keeps its label.
  std::vector<int> known_labels;
  if (pair_method(config.method) && config.label_fraction > 0.0 && train_set.labeled()) {
    known_labels.assign(n, -1);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed({config.seed, 0x1ABE1ULL}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto keep = std::size_t(std::llround(config.label_fraction * double(n)));
    for (std::size_t i = 0; i < keep; ++i) known_labels[order[i]] = train_set.labels[order[i]];
  }

  const AugmentPolicy policy = config.augment_policy();
  const AugmentPolicy classifier_policy = supervised_policy();
  Rng step_rng(derive_seed({config.seed, 0x57E9ULL}));
  const auto start_time = std::chrono::steady_clock::now();
  const std::size_t epochs = config.method == Method::kRandom ? 0 : config.epochs;
  std::size_t global_step = 0;
  std::vector<std::size_t> batch_indices(M);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(config.seed, epoch, n);
    if (config.method == Method::kSupervised) {
      optimizers.front().second->set_lr(step_schedule(config.supervised_lr, epoch - 1, epochs));
    }

    EpochSummary summary;
    summary.epoch = epoch;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::copy_n(order.begin() + s * M, M, batch_indices.begin());
      const std::vector<Image> images = train_set.images_float(batch_indices);
      double loss = 0.0;
      std::optional<double> pair_acc;
      if (pair_method(config.method)) {
        PairLabels labels;
        const bool semi = !known_labels.empty();
        if (semi) {
          labels.avoid_negative_collisions = config.avoid_negative_collisions;
          for (std::size_t i : batch_indices) labels.labels.push_back(known_labels[i]);
        }
        const RelationalStepOptions step_options{
            .views = config.views, .gamma = config.gamma, .policy = policy, .labels = semi ? &labels : nullptr};
        const StepResult r = relational_step(images, model.backbone, *model.scorer, *optimizers[0].second,
                                             *optimizers[1].second, step_options, step_rng);
        loss = r.loss;
        pair_acc = r.pair_accuracy;
        summary.mean_pair_accuracy += r.pair_accuracy;
      } else if (config.method == Method::kRotation) {
        const auto r = rotation_step(images, model.backbone, *model.classifier, *optimizers[0].second);
        loss = r.loss;
        summary.mean_accuracy += r.accuracy;
      } else {
        std::vector<int> labels;
        for (std::size_t i : batch_indices) labels.push_back(train_set.labels[i]);
        const auto r = supervised_step(images, labels, model.backbone, *model.classifier, *optimizers[0].second,
                                       classifier_policy, step_rng);
        loss = r.loss;
        summary.mean_accuracy += r.accuracy;
      }
      ++global_step;
      summary.mean_loss += loss;
      if (hooks.write_files) {
        std::optional<double> elapsed;
        if (config.record_elapsed) {
          elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
        }
        metrics << format_row(epoch, global_step, loss, pair_acc, optimizers.front().second->lr(), elapsed);
        metrics.flush();
        if (!metrics) throw DataError("metrics", "write failed for " + (out_dir / "metrics.csv").string());
      }
    }
    summary.mean_loss /= double(steps_per_epoch);
    summary.mean_pair_accuracy /= double(steps_per_epoch);
    summary.mean_accuracy /= double(steps_per_epoch);
    result.epochs.push_back(summary);
    if (hooks.on_epoch) hooks.on_epoch(summary);
    if (hooks.write_files && config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) {
      save_checkpoint(out_dir / ("checkpoint_epoch_" + std::to_string(epoch) + ".ssrr"), snapshot());
    }
  }

  result.checkpoint = snapshot();
  if (hooks.write_files) save_checkpoint(out_dir / "checkpoint.ssrr", result.checkpoint);
  return result;
}

TrainResult train(const TrainConfig& config) { return train(config, load_datasets(config)); }

EvalReport evaluate(const TrainConfig& config, const Datasets& data, Conv4Backbone<float>& backbone,
                    const EvalOptions& options) {
  EvalReport report;
  if (options.linear) {
    const ProbeOptions probe{.epochs = config.probe_epochs,
                             .batch_size = config.probe_batch,
                             .lr = config.probe_lr,
                             .momentum = 0.9,
                             .standardize = true,
                             .seed = config.seed};
    report.linear = linear_eval(backbone, data.train, data.test, probe);
    report.confusion = confusion_matrix(data.test.labels, report.linear->test_predictions, data.test.num_classes());
  }
  if (options.knn_k > 0) {
    if (!data.test.labeled()) throw std::invalid_argument("evaluate: retrieval needs a labeled test set");
    const MatrixX<double> features = extract_features(backbone, data.test);
    report.knn = knn_retrieval(features, data.test.labels, features, data.test.labels, options.knn_k, true);
    report.knn_k = options.knn_k;
    report.confusion = report.knn->confusion;
  }
  return report;
}

EvalReport evaluate(const TrainConfig& config, const std::filesystem::path& checkpoint_path,
                    const EvalOptions& options) {
  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  const Datasets data = load_datasets(config);
  Model model(config, data.train.labeled() ? data.train.num_classes() : 0);
  restore_model(model, checkpoint);
  EvalReport report = evaluate(config, data, model.backbone, options);
  const std::filesystem::path out_dir(config.out_dir);
  std::filesystem::create_directories(out_dir);
  write_eval_csv(out_dir / "eval.csv", report);
  write_confusion_csv(out_dir / "confusion.csv", report.confusion);
  return report;
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("path", "cannot open " + path.string() + " for writing");
  char buf[128];
  out << "metric,value\n";
  if (report.linear) {
    std::snprintf(buf, sizeof buf, "linear_test_accuracy,%.6f\nlinear_train_accuracy,%.6f\n",
                  report.linear->test_accuracy, report.linear->train_accuracy);
    out << buf;
  }
  if (report.knn) {
    std::snprintf(buf, sizeof buf, "knn_k,%zu\nknn_accuracy,%.6f\n", report.knn_k, report.knn->accuracy);
    out << buf;
  }
  if (!out) throw DataError("path", "write failed for " + path.string());
}

void write_confusion_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& confusion) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("path", "cannot open " + path.string() + " for writing");
  out << "true_class";
  for (std::size_t c = 0; c < confusion.size(); ++c) out << "," << c;
  out << "\n";
  char buf[32];
  for (std::size_t r = 0; r < confusion.size(); ++r) {
    out << r;
    for (double v : confusion[r]) {
      std::snprintf(buf, sizeof buf, ",%.9f", v);
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw DataError("path", "write failed for " + path.string());
}

}  // namespace relreason
