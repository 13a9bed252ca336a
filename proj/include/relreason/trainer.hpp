#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "relreason/baselines.hpp"
#include "relreason/dataio.hpp"
#include "relreason/eval.hpp"

namespace relreason {

/// Invalid configuration; `field()` names the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class Method { kRelational, kRotation, kSupervised, kAblationA, kAblationB, kRandom };
enum class DatasetKind { kSynth, kCifar10, kIdx };

std::string method_name(Method method);
std::string dataset_name(DatasetKind kind);

struct TrainConfig {
  Method method = Method::kRelational;

  DatasetKind dataset = DatasetKind::kSynth;
  // cifar10: directory with data_batch_*.bin + test_batch.bin, or train.bin + test.bin.
  std::string data_dir;
  std::size_t image_size = 32;
  std::size_t num_classes = 10;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // synth: synth_n images, split 80/20
  std::size_t synth_n = 2500;
  std::size_t synth_classes = 4;
  std::size_t synth_size = 32;
  std::uint64_t synth_seed = 0;

  std::size_t batch_size = 64;  // M
  std::size_t views = 4;        // K
  double gamma = 2.0;
  double lr_backbone = 1e-3;  // alpha
  double lr_head = 1e-3;      // beta
  double supervised_lr = 0.1;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  AggregationMode aggregation = AggregationMode::kCat;
  double label_fraction = 0.0;
  bool avoid_negative_collisions = false;

  double crop_min_scale = 0.08;
  double jitter_strength = 0.8;
  double grayscale_prob = 0.2;

  std::string out_dir = "run";
  std::size_t checkpoint_every = 10;
  bool record_elapsed = false;

  std::size_t probe_epochs = 100;
  double probe_lr = 0.1;
  std::size_t probe_batch = 128;
  std::size_t knn_k = 10;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  AugmentPolicy augment_policy() const;
  /// Canonical `key = value` text of every field, in a fixed order.
  std::string to_text() const;
  /// to_text() without out_dir, checkpoint_every and record_elapsed; this is
  /// what checkpoints embed, so runs differing only in output location
  /// produce identical files.
  std::string model_text() const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys and
/// malformed values throw ConfigError. The result is validated.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

struct Checkpoint {
  NamedTensors<float> tensors;
  std::string config;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'S', 'R', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "SSRR", u32 version, u32 tensor count; per tensor: u32 name length, name,
/// u32 rank, u64 dims, f32 data; then u64 config length and the config text.
/// All integers and floats little-endian.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Throws DataError("magic" / "version" / "truncated" / ...) on bad input.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
/// Writes to a temporary sibling, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct Datasets {
  ImageDataset train;
  ImageDataset test;
};

/// Loads or generates the configured train/test sets. Single-channel data is
/// replicated to RGB.
Datasets load_datasets(const TrainConfig& config);

/// Backbone plus whatever head the method trains.
struct Model {
  Conv4Backbone<float> backbone;
  std::unique_ptr<PairScorer<float>> scorer;        // relational and ablations
  std::unique_ptr<LinearProbe<float>> classifier;  // rotation (4-way) or supervised

  Model(const TrainConfig& config, std::size_t num_classes);
  /// Backbone parameters and buffers, then head parameters and buffers.
  NamedTensors<float> tensors() const;
};

/// Seeded visiting order of n training instances in a 1-based epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_pair_accuracy = 0.0;  // relational methods only
  double mean_accuracy = 0.0;       // rotation / supervised training batches
};

struct TrainResult {
  std::unique_ptr<Model> model;
  std::vector<EpochSummary> epochs;
  Checkpoint checkpoint;
};

struct TrainHooks {
  std::function<void(const EpochSummary&)> on_epoch;
  /// When false, nothing is written to out_dir.
  bool write_files = true;
};

/// Runs the configured method. Writes out_dir/metrics.csv (header
/// epoch,step,loss,pair_acc,lr,elapsed_s; one row per step),
/// out_dir/checkpoint_epoch_<E>.ssrr every checkpoint_every epochs and
/// out_dir/checkpoint.ssrr at the end.
TrainResult train(const TrainConfig& config, const Datasets& data, const TrainHooks& hooks = {});
TrainResult train(const TrainConfig& config);

/// Copies backbone and head tensors from a checkpoint into `model`. Throws
/// DataError("architecture") when names or shapes do not match.
void restore_model(Model& model, const Checkpoint& checkpoint);

struct EvalOptions {
  bool linear = true;
  std::size_t knn_k = 0;  // 0 disables retrieval
};

struct EvalReport {
  std::optional<ProbeResult> linear;
  std::optional<RetrievalResult> knn;
  std::size_t knn_k = 0;
  std::vector<std::vector<double>> confusion;
};

/// Linear evaluation on train -> test and/or kNN retrieval within the test
/// set (self excluded). Confusion comes from retrieval when it runs,
/// otherwise from the probe's test predictions.
EvalReport evaluate(const TrainConfig& config, const Datasets& data, Conv4Backbone<float>& backbone,
                    const EvalOptions& options);
/// Loads the checkpoint, evaluates, writes out_dir/eval.csv and
/// out_dir/confusion.csv.
EvalReport evaluate(const TrainConfig& config, const std::filesystem::path& checkpoint, const EvalOptions& options);

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report);
void write_confusion_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& confusion);

}  // namespace relreason
