#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

#include "relreason/trainer.hpp"

namespace relreason {

std::string method_name(Method method) {
  switch (method) {
    case Method::kRelational: return "relational";
    case Method::kRotation: return "rotation";
    case Method::kSupervised: return "supervised";
    case Method::kAblationA: return "ablation_a";
    case Method::kAblationB: return "ablation_b";
    case Method::kRandom: return "random";
  }
  return "?";
}

std::string dataset_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kSynth: return "synth";
    case DatasetKind::kCifar10: return "cifar10";
    case DatasetKind::kIdx: return "idx";
  }
  return "?";
}

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_value(const std::string& key, const std::string& value) {
  if constexpr (std::is_same_v<T, std::string>) {
    return value;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(key, "expected true or false, got '" + value + "'");
  } else {
    T out{};
    const char* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end || value.empty()) {
      throw ConfigError(key, "cannot parse '" + value + "' as a number");
    }
    return out;
  }
}

template <typename T>
std::string format_value(const T& value) {
  if constexpr (std::is_same_v<T, std::string>) {
    return value;
  } else if constexpr (std::is_same_v<T, bool>) {
    return value ? "true" : "false";
  } else {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, ptr);
  }
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field field(const char* key, T TrainConfig::*member) {
  return {key, [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_value<T>(key, v); },
          [member](const TrainConfig& c) { return format_value(c.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"method",
       [](TrainConfig& c, const std::string& v) {
         for (auto m : {Method::kRelational, Method::kRotation, Method::kSupervised, Method::kAblationA,
                        Method::kAblationB, Method::kRandom}) {
           if (method_name(m) == v) {
             c.method = m;
             return;
           }
         }
         throw ConfigError("method", "unknown method '" + v +
                                         "' (expected relational, rotation, supervised, ablation_a, ablation_b, random)");
       },
       [](const TrainConfig& c) { return method_name(c.method); }},
      {"dataset",
       [](TrainConfig& c, const std::string& v) {
         for (auto d : {DatasetKind::kSynth, DatasetKind::kCifar10, DatasetKind::kIdx}) {
           if (dataset_name(d) == v) {
             c.dataset = d;
             return;
           }
         }
         throw ConfigError("dataset", "unknown dataset '" + v + "' (expected synth, cifar10, idx)");
       },
       [](const TrainConfig& c) { return dataset_name(c.dataset); }},
      field("data_dir", &TrainConfig::data_dir),
      field("image_size", &TrainConfig::image_size),
      field("num_classes", &TrainConfig::num_classes),
      field("train_images", &TrainConfig::train_images),
      field("train_labels", &TrainConfig::train_labels),
      field("test_images", &TrainConfig::test_images),
      field("test_labels", &TrainConfig::test_labels),
      field("synth_n", &TrainConfig::synth_n),
      field("synth_classes", &TrainConfig::synth_classes),
      field("synth_size", &TrainConfig::synth_size),
      field("synth_seed", &TrainConfig::synth_seed),
      field("batch_size", &TrainConfig::batch_size),
      field("views", &TrainConfig::views),
      field("gamma", &TrainConfig::gamma),
      field("lr_backbone", &TrainConfig::lr_backbone),
      field("lr_head", &TrainConfig::lr_head),
      field("supervised_lr", &TrainConfig::supervised_lr),
      field("epochs", &TrainConfig::epochs),
      field("seed", &TrainConfig::seed),
      {"aggregation",
       [](TrainConfig& c, const std::string& v) {
         try {
           c.aggregation = parse_aggregation(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError("aggregation", e.what());
         }
       },
       [](const TrainConfig& c) { return aggregation_name(c.aggregation); }},
      field("label_fraction", &TrainConfig::label_fraction),
      field("avoid_negative_collisions", &TrainConfig::avoid_negative_collisions),
      field("crop_min_scale", &TrainConfig::crop_min_scale),
      field("jitter_strength", &TrainConfig::jitter_strength),
      field("grayscale_prob", &TrainConfig::grayscale_prob),
      field("out_dir", &TrainConfig::out_dir),
      field("checkpoint_every", &TrainConfig::checkpoint_every),
      field("record_elapsed", &TrainConfig::record_elapsed),
      field("probe_epochs", &TrainConfig::probe_epochs),
      field("probe_lr", &TrainConfig::probe_lr),
      field("probe_batch", &TrainConfig::probe_batch),
      field("knn_k", &TrainConfig::knn_k),
  };
  return table;
}

bool pair_method(Method m) {
  return m == Method::kRelational || m == Method::kAblationA || m == Method::kAblationB;
}

}  // namespace

void TrainConfig::validate() const {
  const auto require = [](bool ok, const char* field, const std::string& message) {
    if (!ok) throw ConfigError(field, message);
  };
  switch (dataset) {
    case DatasetKind::kCifar10:
      require(!data_dir.empty(), "data_dir", "required for dataset = cifar10");
      require(image_size >= kMinInputSize, "image_size", "must be at least " + std::to_string(kMinInputSize));
      require(num_classes >= 2 && num_classes <= 256, "num_classes", "must be in 2..256");
      break;
    case DatasetKind::kIdx:
      require(!train_images.empty(), "train_images", "required for dataset = idx");
      require(!train_labels.empty(), "train_labels", "required for dataset = idx");
      require(!test_images.empty(), "test_images", "required for dataset = idx");
      require(!test_labels.empty(), "test_labels", "required for dataset = idx");
      break;
    case DatasetKind::kSynth:
      require(synth_n >= 5, "synth_n", "must be at least 5");
      require(synth_classes >= 2 && synth_classes <= kSynthShapeKinds, "synth_classes",
              "must be in 2.." + std::to_string(kSynthShapeKinds));
      require(synth_size >= kMinInputSize, "synth_size", "must be at least " + std::to_string(kMinInputSize));
      break;
  }
  require(batch_size >= (pair_method(method) ? 2u : 1u), "batch_size",
          pair_method(method) ? "must be at least 2 for pair-based methods" : "must be at least 1");
  if (pair_method(method)) require(views >= 2, "views", "must be at least 2 for pair-based methods");
  require(gamma >= 0.0, "gamma", "must be >= 0");
  require(lr_backbone >= 0.0, "lr_backbone", "must be >= 0");
  require(lr_head >= 0.0, "lr_head", "must be >= 0");
  require(supervised_lr >= 0.0, "supervised_lr", "must be >= 0");
  require(label_fraction >= 0.0 && label_fraction <= 1.0, "label_fraction", "must be in [0, 1]");
  require(crop_min_scale > 0.0 && crop_min_scale <= 1.0, "crop_min_scale", "must be in (0, 1]");
  require(jitter_strength >= 0.0, "jitter_strength", "must be >= 0");
  require(grayscale_prob >= 0.0 && grayscale_prob <= 1.0, "grayscale_prob", "must be in [0, 1]");
  require(!out_dir.empty(), "out_dir", "must not be empty");
  require(probe_epochs >= 1, "probe_epochs", "must be at least 1");
  require(probe_lr > 0.0, "probe_lr", "must be > 0");
  require(probe_batch >= 1, "probe_batch", "must be at least 1");
  require(knn_k >= 1, "knn_k", "must be at least 1");
}

AugmentPolicy TrainConfig::augment_policy() const {
  AugmentPolicy policy;
  policy.crop_scale = {crop_min_scale, 1.0};
  policy.grayscale_prob = grayscale_prob;
  policy.jitter_max = {jitter_strength, jitter_strength, jitter_strength, std::min(0.5, jitter_strength / 4.0)};
  return policy;
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

std::string TrainConfig::model_text() const {
  std::string out;
  for (const auto& f : fields()) {
    const std::string_view key = f.key;
    if (key == "out_dir" || key == "checkpoint_every" || key == "record_elapsed") continue;
    out += std::string(key) + " = " + f.get(*this) + "\n";
  }
  return out;
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig config;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number), "expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
    if (it == table.end()) throw ConfigError(key, "unknown key");
    it->set(config, value);
  }
  config.validate();
  return config;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("config", "cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

}  // namespace relreason
