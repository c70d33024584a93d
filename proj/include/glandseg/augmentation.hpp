#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "glandseg/dataset_io.hpp"

namespace glandseg {

struct AugmentConfig {
  int factor = 10;
  double shift_frac = 0.1;   // max shift as a fraction of the side length
  double rot_deg = 20.0;     // rotation drawn from [-rot_deg, rot_deg]
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double flip_h = 0.5;       // probabilities
  double flip_v = 0.5;
  std::uint64_t seed = 0;

  /// Throws InputError when a field is out of range.
  void validate() const;
};

/// One concrete geometric transform, applied about the image centre as
/// shift o rotate o zoom o flip. Out-of-frame source pixels are mirrored.
struct AffineParams {
  double shift_x = 0.0;  // pixels
  double shift_y = 0.0;
  double rotation_deg = 0.0;
  double zoom = 1.0;
  bool flip_h = false;
  bool flip_v = false;

  bool is_identity() const {
    return shift_x == 0.0 && shift_y == 0.0 && rotation_deg == 0.0 && zoom == 1.0 && !flip_h && !flip_v;
  }
};

/// A sample together with its derived targets, the unit the trainer consumes.
struct TrainingSample {
  std::string id;
  RgbImage image;
  LabelMap instance_mask;
  TargetPair targets;
};

TrainingSample make_training_sample(const ImageSample& sample, int band_width);

AffineParams draw_transform(const AugmentConfig& cfg, int height, int width, std::mt19937_64& rng);

/// Bilinear resampling for the image, nearest-neighbour for every mask.
TrainingSample augment_sample(const TrainingSample& sample, const AffineParams& params);

RgbImage warp_bilinear(const RgbImage& image, const AffineParams& params);
template <typename T>
Image<T> warp_nearest(const Image<T>& mask, const AffineParams& params);

/// factor copies of every training sample; copy 0 is the untouched original.
/// Copy k of sample `id` draws from an RNG seeded by (cfg.seed, id, k), so
/// the stream does not depend on processing order.
std::vector<TrainingSample> build_augmented_set(const DatasetSplit& split, const AugmentConfig& cfg,
                                                int band_width);

std::mt19937_64 sample_rng(std::uint64_t seed, const std::string& id, int copy);

}  // namespace glandseg
