#include "glandseg/postprocess.hpp"

#include "glandseg/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>

namespace glandseg {

void FusionConfig::validate() const {
  if (!(tau_gland > 0.0 && tau_gland < 1.0)) throw InputError("tau_gland must be in (0, 1)");
  if (!(tau_contour > 0.0 && tau_contour < 1.0)) throw InputError("tau_contour must be in (0, 1)");
  if (min_object_px < 0) throw InputError("min_object_px must be >= 0");
  if (restore_dilate_px < 0) throw InputError("restore_dilate_px must be >= 0");
}

int scaled_min_object_px(int min_object_px, int height, int width) {
  return static_cast<int>(std::lround(min_object_px * (static_cast<double>(height) * width) / kReferenceArea));
}

LabelMap label_components(const BinaryMask& mask, int connectivity, int* count) {
  if (connectivity != 4 && connectivity != 8) throw InputError("connectivity must be 4 or 8");
  const int h = mask.height(), w = mask.width();
  LabelMap labels(h, w);
  int next = 0;
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x) || labels.at(y, x)) continue;
      ++next;
      labels.at(y, x) = next;
      queue.emplace_back(y, x);
      while (!queue.empty()) {
        const auto [cy, cx] = queue.front();
        queue.pop_front();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (!mask.at(ny, nx) || labels.at(ny, nx)) continue;
            labels.at(ny, nx) = next;
            queue.emplace_back(ny, nx);
          }
        }
      }
    }
  }
  if (count) *count = next;
  return labels;
}

BinaryMask fusion_seed(const ProbabilityPair& probs, const FusionConfig& cfg) {
  require_same_extent(probs.gland, probs.contour, "fuse");
  BinaryMask seed(probs.gland.height(), probs.gland.width());
  for (std::size_t i = 0; i < seed.size(); ++i) {
    seed.data()[i] = (probs.gland.data()[i] >= cfg.tau_gland && !(probs.contour.data()[i] >= cfg.tau_contour)) ? 1 : 0;
  }
  return seed;
}

LabelMap remove_small_components(const LabelMap& labels, int min_px) {
  std::vector<std::size_t> area(static_cast<std::size_t>(max_label(labels)) + 1, 0);
  for (const auto v : labels.values()) ++area[static_cast<std::size_t>(v)];
  LabelMap out = labels;
  for (auto& v : out.values()) {
    if (v > 0 && area[static_cast<std::size_t>(v)] < static_cast<std::size_t>(min_px)) v = 0;
  }
  return out;
}

LabelMap fill_holes(const LabelMap& labels) {
  const int h = labels.height(), w = labels.width();
  LabelMap out = labels;
  BinaryMask background(h, w);
  for (std::size_t i = 0; i < background.size(); ++i) background.data()[i] = labels.data()[i] == 0;
  int regions = 0;
  const LabelMap holes = label_components(background, 4, &regions);
  std::vector<bool> touches_border(static_cast<std::size_t>(regions) + 1, false);
  std::vector<std::set<int>> neighbours(static_cast<std::size_t>(regions) + 1);
  constexpr int kDy[4] = {-1, 1, 0, 0};
  constexpr int kDx[4] = {0, 0, -1, 1};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int r = holes.at(y, x);
      if (!r) continue;
      if (y == 0 || x == 0 || y == h - 1 || x == w - 1) touches_border[static_cast<std::size_t>(r)] = true;
      for (int k = 0; k < 4; ++k) {
        const int ny = y + kDy[k], nx = x + kDx[k];
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        if (labels.at(ny, nx)) neighbours[static_cast<std::size_t>(r)].insert(labels.at(ny, nx));
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto r = static_cast<std::size_t>(holes.at(y, x));
      if (r && !touches_border[r] && neighbours[r].size() == 1) out.at(y, x) = *neighbours[r].begin();
    }
  }
  return out;
}

LabelMap constrained_dilate(const LabelMap& labels, int radius) {
  const int h = labels.height(), w = labels.width();
  LabelMap cur = labels;
  for (int step = 0; step < radius; ++step) {
    LabelMap next = cur;
    bool changed = false;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (cur.at(y, x)) continue;
        int found = 0;
        bool conflict = false;
        for (int dy = -1; dy <= 1 && !conflict; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const int v = cur.at(ny, nx);
            if (!v) continue;
            if (found && v != found) {
              conflict = true;
              break;
            }
            found = v;
          }
        }
        if (found && !conflict) {
          next.at(y, x) = found;
          changed = true;
        }
      }
    }
    cur = std::move(next);
    if (!changed) break;
  }
  return cur;
}

LabelMap relabel_sequential(const LabelMap& labels, int* count) {
  std::vector<int> remap(static_cast<std::size_t>(max_label(labels)) + 1, 0);
  int next = 0;
  LabelMap out(labels.height(), labels.width());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int v = labels.data()[i];
    if (!v) continue;
    auto& r = remap[static_cast<std::size_t>(v)];
    if (!r) r = ++next;
    out.data()[i] = r;
  }
  if (count) *count = next;
  return out;
}

InstanceResult fuse(const ProbabilityPair& probs, const FusionConfig& cfg) {
  cfg.validate();
  const BinaryMask seed = fusion_seed(probs, cfg);
  LabelMap labels = label_components(seed, 8);
  labels = remove_small_components(labels, scaled_min_object_px(cfg.min_object_px, seed.height(), seed.width()));
  if (cfg.fill_holes) labels = fill_holes(labels);
  labels = constrained_dilate(labels, cfg.restore_dilate_px);
  InstanceResult r;
  r.labels = relabel_sequential(labels, &r.object_count);
  r.binary_mask = BinaryMask(seed.height(), seed.width());
  for (std::size_t i = 0; i < r.labels.size(); ++i) r.binary_mask.data()[i] = r.labels.data()[i] > 0;
  return r;
}

RgbImage overlay_boundaries(const RgbImage& image, const LabelMap& labels) {
  require_same_extent(image, labels, "overlay");
  RgbImage out = image;
  const int h = labels.height(), w = labels.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int v = labels.at(y, x);
      if (!v) continue;
      bool edge = false;
      for (const auto& [dy, dx] : {std::pair{-1, 0}, std::pair{1, 0}, std::pair{0, -1}, std::pair{0, 1}}) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w || labels.at(ny, nx) != v) edge = true;
      }
      if (edge) {
        out.at(y, x, 0) = 0;
        out.at(y, x, 1) = 255;
        out.at(y, x, 2) = 0;
      } else {
        out.at(y, x, 1) = static_cast<std::uint8_t>((out.at(y, x, 1) + 255) / 2);
      }
    }
  }
  return out;
}

}  // namespace glandseg
