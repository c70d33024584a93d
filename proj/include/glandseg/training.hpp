#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "glandseg/augmentation.hpp"
#include "glandseg/network.hpp"
#include "glandseg/tiling.hpp"

namespace glandseg {

struct TrainConfig {
  int epochs = 12;
  int batch_size = 4;
  double lr = 1e-3;
  double rho = 0.9;   // decay of the squared-gradient running average
  double eps = 1e-8;
  double dice_smooth = 1.0;
  double head_weight_gland = 1.0;
  double head_weight_contour = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
template <typename T>
double bce(std::span<const T> pred, std::span<const T> target);

/// (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth)
template <typename T>
double soft_dice(std::span<const T> pred, std::span<const T> target, double smooth);

/// bce + (1 - soft_dice)
template <typename T>
double head_loss(std::span<const T> pred, std::span<const T> target, double smooth);

/// head_loss and its derivative; `grad` receives scale * d(head_loss)/d(pred).
template <typename T>
double head_loss_grad(std::span<const T> pred, std::span<const T> target, double smooth, double scale,
                      std::span<T> grad);

struct LossBreakdown {
  double total = 0.0;
  double gland = 0.0;
  double contour = 0.0;
};

/// Loss of one two-channel head against a binary target (N x 1 x H x W):
/// the mean of head_loss(foreground, t) and head_loss(background, 1 - t).
/// When `grad` is non-null it receives scale * dL/d(probabilities).
template <typename T>
double two_channel_head_loss(const Tensor<T>& probs, const Tensor<T>& target, double smooth, double scale,
                             Tensor<T>* grad);

/// Weighted sum over both heads; fills gradients when both pointers are set.
template <typename T>
LossBreakdown composite_loss(const typename UNet<T>::Output& out, const Tensor<T>& gland_target,
                             const Tensor<T>& contour_target, const TrainConfig& cfg, Tensor<T>* d_gland,
                             Tensor<T>* d_contour);

template <typename T>
struct OptimizerState {
  ParamSet<T> mean_square;  // running average of squared gradients
  std::int64_t step = 0;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const ParamSet<T>& weights);

/// v <- rho v + (1 - rho) g^2 ;  p <- p - lr g / (sqrt(v) + eps), element-wise.
/// Throws NumericalError naming the parameter when a gradient is not finite.
template <typename T>
void rmsprop_step(ParamSet<T>& weights, const ParamSet<T>& grads, OptimizerState<T>& state,
                  const TrainConfig& cfg);

/// One network-sized training example.
struct TrainingPatch {
  RgbImage image;
  BinaryMask gland;
  BinaryMask contour;
};

/// Tiles every sample (image and both masks on the same grid).
std::vector<TrainingPatch> make_training_patches(const std::vector<TrainingSample>& samples, int patch_size,
                                                 PadMode pad_mode);

struct StepRecord {
  int epoch = 0;  // 1-based
  int step = 0;   // 1-based, counted across epochs
  double loss_total = 0.0;
  double loss_gland = 0.0;
  double loss_contour = 0.0;
  double pixel_dice = 0.0;  // hard Dice of the gland head on the batch
};

struct EpochSummary {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_pixel_dice = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochSummary> epochs;
};

struct TrainOptions {
  /// When set: checkpoint_epoch<k>.gsck, checkpoint.gsck (latest) and loss_log.csv.
  std::filesystem::path output_dir;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochSummary&)> on_epoch;
};

struct TrainResult {
  NetworkParams<float> params;
  TrainLog log;
};

/// epochs x ceil(N / batch_size) RMSprop steps over shuffled patches.
/// Deterministic for a fixed cfg.seed. On a non-finite loss throws
/// NumericalError; checkpoints of completed epochs stay on disk.
TrainResult train(const std::vector<TrainingPatch>& patches, const NetworkConfig& net_cfg,
                  const TrainConfig& cfg, const TrainOptions& options = {});

std::string loss_csv_header();
std::string loss_csv_row(const StepRecord& r);

/// Hard Dice of (pred >= 0.5) against a binary target; 1 when both are empty.
template <typename T>
double thresholded_dice(std::span<const T> pred, std::span<const T> target);

}  // namespace glandseg
