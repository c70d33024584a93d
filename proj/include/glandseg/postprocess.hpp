#pragma once

#include "glandseg/image.hpp"
#include "glandseg/network.hpp"

namespace glandseg {

struct FusionConfig {
  double tau_gland = 0.5;
  double tau_contour = 0.5;
  int min_object_px = 500;  // at 775 x 522; scaled with image area
  bool fill_holes = true;
  int restore_dilate_px = 2;

  void validate() const;
};

struct InstanceResult {
  BinaryMask binary_mask;
  LabelMap labels;  // contiguous 1..object_count
  int object_count = 0;
};

/// Reference frame area for min_object_px scaling (Warwick-QU frame).
inline constexpr double kReferenceArea = 775.0 * 522.0;

int scaled_min_object_px(int min_object_px, int height, int width);

/// Connected components of a binary mask (4 or 8 connectivity). Labels are
/// assigned in row-major order of each component's first pixel.
LabelMap label_components(const BinaryMask& mask, int connectivity, int* count = nullptr);

/// (gland >= tau_gland) and not (contour >= tau_contour)
BinaryMask fusion_seed(const ProbabilityPair& probs, const FusionConfig& cfg);

LabelMap remove_small_components(const LabelMap& labels, int min_px);
/// Fills background regions that do not reach the border and touch exactly one label.
LabelMap fill_holes(const LabelMap& labels);
/// Grows every label by `radius` pixels (8-neighbourhood steps). A background
/// pixel reachable from two labels in the same step stays background.
LabelMap constrained_dilate(const LabelMap& labels, int radius);
/// Relabels to 1..K in row-major first-pixel order.
LabelMap relabel_sequential(const LabelMap& labels, int* count = nullptr);

/// Threshold fusion of the two probability maps into labelled glands:
/// seed, 8-connected components, small-object removal, hole filling,
/// constrained dilation, contiguous relabelling.
InstanceResult fuse(const ProbabilityPair& probs, const FusionConfig& cfg);

/// Source image with instance boundaries drawn in green.
RgbImage overlay_boundaries(const RgbImage& image, const LabelMap& labels);

}  // namespace glandseg
