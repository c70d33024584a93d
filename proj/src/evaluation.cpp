#include "glandseg/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <tuple>

namespace glandseg {
namespace {

// Object areas and pairwise intersections of two label maps.
struct Overlap {
  std::map<int, long> pred_area;
  std::map<int, long> gt_area;
  std::map<std::pair<int, int>, long> inter;  // (pred, gt)
};

Overlap overlap(const LabelMap& pred, const LabelMap& gt) {
  require_same_extent(pred, gt, "object metrics");
  Overlap o;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred.data()[i], g = gt.data()[i];
    if (p) ++o.pred_area[p];
    if (g) ++o.gt_area[g];
    if (p && g) ++o.inter[{p, g}];
  }
  return o;
}

struct Counts {
  long inter = 0, pred = 0, gt = 0;
};

Counts count_binary(const BinaryMask& pred, const BinaryMask& gt, const char* what) {
  require_same_extent(pred, gt, what);
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] != 0, g = gt.data()[i] != 0;
    c.inter += p && g;
    c.pred += p;
    c.gt += g;
  }
  return c;
}

BinaryMask binarize(const LabelMap& labels) {
  BinaryMask m(labels.height(), labels.width());
  for (std::size_t i = 0; i < labels.size(); ++i) m.data()[i] = labels.data()[i] > 0;
  return m;
}

// For every object on side A: Dice with the B object of largest intersection
// (ties: larger Dice), weighted by area share.
double directed_object_dice(const std::map<int, long>& areas_a, const std::map<int, long>& areas_b,
                            const std::map<std::pair<int, int>, long>& inter, bool a_is_pred) {
  long total = 0;
  for (const auto& [label, area] : areas_a) total += area;
  if (total == 0) return 0.0;
  double sum = 0.0;
  for (const auto& [a, area_a] : areas_a) {
    long best_inter = 0;
    double best_dice = 0.0;
    for (const auto& [b, area_b] : areas_b) {
      const auto it = a_is_pred ? inter.find({a, b}) : inter.find({b, a});
      if (it == inter.end()) continue;
      const double d = 2.0 * it->second / static_cast<double>(area_a + area_b);
      if (it->second > best_inter || (it->second == best_inter && d > best_dice)) {
        best_inter = it->second;
        best_dice = d;
      }
    }
    sum += static_cast<double>(area_a) / total * best_dice;
  }
  return sum;
}

}  // namespace

double pixel_dice(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = count_binary(pred, gt, "pixel_dice");
  if (c.pred + c.gt == 0) return 1.0;
  return 2.0 * c.inter / static_cast<double>(c.pred + c.gt);
}

double pixel_iou(const BinaryMask& pred, const BinaryMask& gt) {
  const auto c = count_binary(pred, gt, "pixel_iou");
  const long uni = c.pred + c.gt - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / uni;
}

ObjectScores object_f1(const LabelMap& pred, const LabelMap& gt, double iou_match) {
  const Overlap o = overlap(pred, gt);
  ObjectScores s;
  s.pred_objects = static_cast<int>(o.pred_area.size());
  s.gt_objects = static_cast<int>(o.gt_area.size());
  if (s.pred_objects == 0 && s.gt_objects == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  std::vector<std::tuple<double, int, int>> pairs;  // (iou, pred, gt)
  for (const auto& [key, in] : o.inter) {
    const double uni = static_cast<double>(o.pred_area.at(key.first) + o.gt_area.at(key.second) - in);
    const double iou = in / uni;
    if (iou > iou_match) pairs.emplace_back(iou, key.first, key.second);
  }
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    return std::tie(std::get<1>(a), std::get<2>(a)) < std::tie(std::get<1>(b), std::get<2>(b));
  });
  std::map<int, bool> used_pred, used_gt;
  for (const auto& [iou, p, g] : pairs) {
    if (used_pred[p] || used_gt[g]) continue;
    used_pred[p] = used_gt[g] = true;
    ++s.true_positives;
  }
  s.precision = s.pred_objects ? static_cast<double>(s.true_positives) / s.pred_objects : 0.0;
  s.recall = s.gt_objects ? static_cast<double>(s.true_positives) / s.gt_objects : 0.0;
  s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

double object_dice(const LabelMap& pred, const LabelMap& gt) {
  const Overlap o = overlap(pred, gt);
  if (o.pred_area.empty() && o.gt_area.empty()) return 1.0;
  if (o.pred_area.empty() || o.gt_area.empty()) return 0.0;
  return 0.5 * (directed_object_dice(o.gt_area, o.pred_area, o.inter, false) +
                directed_object_dice(o.pred_area, o.gt_area, o.inter, true));
}

ImageMetrics evaluate_image(const std::string& id, const LabelMap& pred, const LabelMap& gt, double iou_match) {
  ImageMetrics m;
  m.id = id;
  const auto pb = binarize(pred), gb = binarize(gt);
  m.pixel_dice = pixel_dice(pb, gb);
  m.pixel_iou = pixel_iou(pb, gb);
  const auto f = object_f1(pred, gt, iou_match);
  m.object_f1 = f.f1;
  m.precision = f.precision;
  m.recall = f.recall;
  m.object_dice = object_dice(pred, gt);
  return m;
}

MetricsReport aggregate(std::vector<ImageMetrics> per_image) {
  MetricsReport r;
  r.per_image = std::move(per_image);
  if (r.per_image.empty()) return r;
  for (const auto& m : r.per_image) {
    r.pixel_dice += m.pixel_dice;
    r.pixel_iou += m.pixel_iou;
    r.object_f1 += m.object_f1;
    r.object_dice += m.object_dice;
  }
  const double n = static_cast<double>(r.per_image.size());
  r.pixel_dice /= n;
  r.pixel_iou /= n;
  r.object_f1 /= n;
  r.object_dice /= n;
  return r;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["pixel_dice"] = report.pixel_dice;
  j["pixel_iou"] = report.pixel_iou;
  j["object_f1"] = report.object_f1;
  j["object_dice"] = report.object_dice;
  j["per_image"] = nlohmann::json::array();
  for (const auto& m : report.per_image) {
    j["per_image"].push_back({{"id", m.id},
                              {"pixel_dice", m.pixel_dice},
                              {"pixel_iou", m.pixel_iou},
                              {"object_f1", m.object_f1},
                              {"object_dice", m.object_dice},
                              {"precision", m.precision},
                              {"recall", m.recall}});
  }
  return j;
}

std::string to_table(const MetricsReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %10s %10s %10s %10s\n", "image", "pix_dice", "pix_iou", "obj_f1",
                "obj_dice");
  out += line;
  for (const auto& m : report.per_image) {
    std::snprintf(line, sizeof(line), "%-24s %10.4f %10.4f %10.4f %10.4f\n", m.id.c_str(), m.pixel_dice,
                  m.pixel_iou, m.object_f1, m.object_dice);
    out += line;
  }
  std::snprintf(line, sizeof(line), "%-24s %10.4f %10.4f %10.4f %10.4f\n", "mean", report.pixel_dice,
                report.pixel_iou, report.object_f1, report.object_dice);
  out += line;
  return out;
}

}  // namespace glandseg
