#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "glandseg/image.hpp"

namespace glandseg {

/// 2|P & G| / (|P| + |G|), 1 when both masks are empty.
double pixel_dice(const BinaryMask& pred, const BinaryMask& gt);
/// |P & G| / |P | G|, 1 when both masks are empty.
double pixel_iou(const BinaryMask& pred, const BinaryMask& gt);

struct ObjectScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int true_positives = 0;
  int pred_objects = 0;
  int gt_objects = 0;
};

/// Greedy one-to-one matching by descending IoU; a pair counts when IoU > iou_match.
/// Ties are broken by (pred label, gt label). Both maps empty scores 1.
ObjectScores object_f1(const LabelMap& pred, const LabelMap& gt, double iou_match = 0.5);

/// Area-weighted mean Dice of every object against its best-overlapping
/// counterpart, averaged over both directions.
double object_dice(const LabelMap& pred, const LabelMap& gt);

struct ImageMetrics {
  std::string id;
  double pixel_dice = 0.0;
  double pixel_iou = 0.0;
  double object_f1 = 0.0;
  double object_dice = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct MetricsReport {
  double pixel_dice = 0.0;
  double pixel_iou = 0.0;
  double object_f1 = 0.0;
  double object_dice = 0.0;
  std::vector<ImageMetrics> per_image;
};

ImageMetrics evaluate_image(const std::string& id, const LabelMap& pred, const LabelMap& gt,
                            double iou_match = 0.5);
/// Aggregates are plain means of the per-image values.
MetricsReport aggregate(std::vector<ImageMetrics> per_image);

nlohmann::json to_json(const MetricsReport& report);
std::string to_table(const MetricsReport& report);

}  // namespace glandseg
