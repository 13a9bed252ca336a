#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "relreason/gradcheck.hpp"
#include "relreason/runtime.hpp"
#include "relreason/trainer.hpp"

using namespace relreason;

namespace {

constexpr int kOk = 0;
constexpr int kConfigFailure = 1;
constexpr int kIoFailure = 2;
constexpr int kCheckFailure = 3;
constexpr double kGradTolerance = 1e-3;
constexpr std::uint64_t kGradSeeds = 5;

int run_train(const std::string& config_path, std::optional<std::uint64_t> seed, std::optional<std::size_t> epochs,
              const std::string& out) {
  TrainConfig config = load_config(config_path);
  if (seed) config.seed = *seed;
  if (epochs) config.epochs = *epochs;
  if (!out.empty()) config.out_dir = out;
  config.validate();
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochSummary& s) {
    if (config.method == Method::kRotation || config.method == Method::kSupervised) {
      std::fprintf(stderr, "epoch %zu/%zu loss %.5f acc %.4f\n", s.epoch, config.epochs, s.mean_loss, s.mean_accuracy);
    } else {
      std::fprintf(stderr, "epoch %zu/%zu loss %.5f pair_acc %.4f\n", s.epoch, config.epochs, s.mean_loss,
                   s.mean_pair_accuracy);
    }
  };
  train(config, load_datasets(config), hooks);
  std::printf("wrote %s\n", (std::filesystem::path(config.out_dir) / "checkpoint.ssrr").string().c_str());
  return kOk;
}

int run_evaluate(const std::string& config_path, const std::string& checkpoint, std::optional<std::size_t> knn,
                 bool linear) {
  TrainConfig config = load_config(config_path);
  EvalOptions options;
  options.linear = linear || !knn;
  options.knn_k = knn ? *knn : 0;
  if (!linear && !knn) options.knn_k = config.knn_k;
  const EvalReport report = evaluate(config, checkpoint, options);
  if (report.linear) std::printf("linear_test_accuracy %.4f\n", report.linear->test_accuracy);
  if (report.knn) std::printf("knn@%zu_accuracy %.4f\n", report.knn_k, report.knn->accuracy);
  std::printf("wrote %s\n", (std::filesystem::path(config.out_dir) / "eval.csv").string().c_str());
  return kOk;
}

int run_gradcheck(const std::string& op_filter) {
  std::vector<OpKind> ops;
  const bool end_to_end = op_filter.empty() || op_filter == "end_to_end";
  if (op_filter.empty()) {
    ops.assign(all_ops().begin(), all_ops().end());
  } else if (!end_to_end) {
    const auto op = parse_op(op_filter);
    if (!op) {
      std::string known;
      for (OpKind k : all_ops()) known += " " + std::string(op_name(k));
      throw ConfigError("op", "unknown op '" + op_filter + "'; known:" + known + " end_to_end");
    }
    ops.push_back(*op);
  }
  bool ok = true;
  const auto report = [&](const std::string& name, double worst) {
    const bool pass = worst < kGradTolerance;
    ok = ok && pass;
    std::printf("%-24s max_rel_err %.3e  %s\n", name.c_str(), worst, pass ? "ok" : "FAIL");
  };
  for (OpKind op : ops) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) worst = std::max(worst, grad_check(op, seed));
    report(std::string(op_name(op)), worst);
  }
  if (end_to_end) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
      worst = std::max(worst, end_to_end_grad_check(seed).max_relative_error);
    }
    report("end_to_end", worst);
  }
  return ok ? kOk : kCheckFailure;
}

int run_synth(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed, const std::string& out) {
  if (classes < 2 || classes > kSynthShapeKinds) {
    throw ConfigError("classes", "must be in 2.." + std::to_string(kSynthShapeKinds));
  }
  if (size < kMinInputSize) throw ConfigError("size", "must be at least " + std::to_string(kMinInputSize));
  if (n < 5) throw ConfigError("n", "must be at least 5");
  const std::filesystem::path dir(out);
  std::filesystem::create_directories(dir);
  const auto split = split_train_test(synth_shapes(n, classes, size, seed), seed);
  write_cifar_format(dir / "train.bin", split.train);
  write_cifar_format(dir / "test.bin", split.test);
  std::ofstream conf(dir / "dataset.conf");
  conf << "# Append to a training config to use this data.\n"
       << "dataset = cifar10\n"
       << "data_dir = " << std::filesystem::absolute(dir).string() << "\n"
       << "image_size = " << size << "\n"
       << "num_classes = " << classes << "\n";
  if (!conf) throw DataError("path", "write failed for " + (dir / "dataset.conf").string());
  std::printf("wrote %zu train / %zu test images to %s\n", split.train.size(), split.test.size(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Self-supervised relational reasoning trainer"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, op;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, knn;
  bool linear = false;

  auto* train_cmd = app.add_subcommand("train", "Train a backbone with the configured method");
  train_cmd->add_option("--config", config_path, "Config file (key = value)")->required();
  train_cmd->add_option("--seed", seed, "Override the config seed");
  train_cmd->add_option("--epochs", epochs, "Override the config epoch count");
  train_cmd->add_option("--out", out, "Override the output directory");

  auto* eval_cmd = app.add_subcommand("evaluate", "Linear evaluation and/or kNN retrieval of a checkpoint");
  eval_cmd->add_option("--config", config_path, "Config file (key = value)")->required();
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (.ssrr)")->required();
  eval_cmd->add_option("--knn", knn, "Run retrieval with this many neighbors");
  eval_cmd->add_flag("--linear", linear, "Run linear evaluation");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  grad_cmd->add_option("--op", op, "Single op name, or end_to_end");

  std::size_t synth_n = 2500, synth_classes = 4, synth_size = 32;
  std::uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic shapes dataset in CIFAR binary format");
  synth_cmd->add_option("--n", synth_n, "Total images (split 80/20)")->required();
  synth_cmd->add_option("--classes", synth_classes, "Shape classes")->required();
  synth_cmd->add_option("--size", synth_size, "Image side in pixels")->required();
  synth_cmd->add_option("--seed", synth_seed, "Seed")->required();
  synth_cmd->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigFailure;
  }

  try {
    if (*train_cmd) return run_train(config_path, seed, epochs, out);
    if (*eval_cmd) return run_evaluate(config_path, checkpoint, knn, linear);
    if (*grad_cmd) return run_gradcheck(op);
    if (*synth_cmd) return run_synth(synth_n, synth_classes, synth_size, synth_seed, out);
  } catch (const DataError& e) {
    std::fprintf(stderr, "error (%s): %s\n", e.field().c_str(), e.what());
    return kIoFailure;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIoFailure;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigFailure;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigFailure;
  }
  return kOk;
}
