#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "glandseg/augmentation.hpp"
#include "glandseg/evaluation.hpp"
#include "glandseg/network.hpp"
#include "glandseg/postprocess.hpp"
#include "glandseg/tiling.hpp"
#include "glandseg/training.hpp"

namespace glandseg {

/// Everything a command needs, read from a flat `key = value` file.
struct RunConfig {
  std::filesystem::path dataset_root;
  std::filesystem::path output_dir;
  std::filesystem::path checkpoint;
  std::filesystem::path predictions_dir;
  std::filesystem::path split_manifest;

  NetworkConfig network;
  TrainConfig train;
  AugmentConfig augment;
  FusionConfig fusion;

  int band_width = 2;
  int patch_size = 0;  // 0: follow network.input_size
  PadMode pad_mode = PadMode::kReflect;
  double iou_match = 0.5;

  int synth_n = 24;
  int synth_height = 256;
  int synth_width = 256;
  std::uint64_t synth_seed = 0;
  double synth_test_fraction = 1.0 / 3.0;

  /// Throws InputError on unknown or duplicate keys and malformed values.
  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;

  int effective_patch_size() const { return patch_size > 0 ? patch_size : network.input_size; }
  void validate() const;

 private:
  bool restore_dilate_set_ = false;
};

struct CommandOptions {
  std::optional<std::filesystem::path> out;  // overrides output_dir
  bool verbose = false;
};

enum ExitCode { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

int cmd_synth(const RunConfig& cfg, const CommandOptions& opts = {});
int cmd_train(const RunConfig& cfg, const CommandOptions& opts = {});
/// Predicts the given images, or the dataset's test split when `images` is empty.
int cmd_predict(const RunConfig& cfg, const std::vector<std::filesystem::path>& images,
                const CommandOptions& opts = {});
int cmd_evaluate(const RunConfig& cfg, const CommandOptions& opts = {});

/// Whole-image inference: tile, run the network per batch of patches, merge.
ProbabilityPair predict_probabilities(const UNet<float>& net, const NetworkParams<float>& params,
                                      const RgbImage& image, int batch_size, PadMode pad_mode);

/// `glandseg train|predict|evaluate|synth --config <path> [--out <dir>] [-v]`
int run_cli(int argc, char** argv);

}  // namespace glandseg
