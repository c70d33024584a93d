#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "glandseg/image.hpp"

namespace glandseg {

enum class PadMode { kReflect, kZero };

PadMode parse_pad_mode(const std::string& s);
std::string to_string(PadMode mode);

/// Non-overlapping decomposition of an image into square patches.
struct PatchGrid {
  int orig_h = 0;
  int orig_w = 0;
  int patch_size = 256;
  int pad_h = 0;
  int pad_w = 0;
  int rows = 0;
  int cols = 0;
  PadMode pad_mode = PadMode::kReflect;

  int count() const { return rows * cols; }
  int patch_y(int index) const { return (index / cols) * patch_size; }
  int patch_x(int index) const { return (index % cols) * patch_size; }
};

PatchGrid make_grid(int height, int width, int patch_size, PadMode pad_mode = PadMode::kReflect);

/// Mirror index into [0, n) with edge repetition (... c b a | a b c ... | c b a ...).
/// Defined for any integer, including offsets larger than n.
int mirror_index(int i, int n);

template <typename T>
struct Tiles {
  PatchGrid grid;
  std::vector<Image<T>> patches;  // row-major
};

/// Pads to rows*patch_size x cols*patch_size (bottom/right) and cuts row-major patches.
template <typename T>
Tiles<T> split(const Image<T>& image, int patch_size, PadMode pad_mode = PadMode::kReflect) {
  Tiles<T> out;
  out.grid = make_grid(image.height(), image.width(), patch_size, pad_mode);
  const auto& g = out.grid;
  const int c = image.channels();
  out.patches.reserve(g.count());
  for (int index = 0; index < g.count(); ++index) {
    Image<T> patch(patch_size, patch_size, c);
    const int oy = g.patch_y(index), ox = g.patch_x(index);
    for (int y = 0; y < patch_size; ++y) {
      const int sy = oy + y;
      const bool y_in = sy < image.height();
      const int my = y_in ? sy : mirror_index(sy, image.height());
      for (int x = 0; x < patch_size; ++x) {
        const int sx = ox + x;
        const bool inside = y_in && sx < image.width();
        if (!inside && pad_mode == PadMode::kZero) continue;
        const int mx = sx < image.width() ? sx : mirror_index(sx, image.width());
        for (int ch = 0; ch < c; ++ch) patch.at(y, x, ch) = image.at(my, mx, ch);
      }
    }
    out.patches.push_back(std::move(patch));
  }
  return out;
}

/// Reassembles row-major patches and crops the padding away.
template <typename T>
Image<T> merge(const PatchGrid& grid, const std::vector<Image<T>>& patches) {
  if (static_cast<int>(patches.size()) != grid.count()) {
    throw ShapeError("merge: expected " + std::to_string(grid.count()) + " patches, got " +
                     std::to_string(patches.size()));
  }
  if (patches.empty()) return {};
  const int c = patches.front().channels();
  for (const auto& p : patches) {
    if (!p.same_shape(grid.patch_size, grid.patch_size, c)) {
      throw ShapeError("merge: patch shape " + std::to_string(p.height()) + "x" + std::to_string(p.width()) +
                       "x" + std::to_string(p.channels()) + " does not match grid patch size " +
                       std::to_string(grid.patch_size));
    }
  }
  Image<T> out(grid.orig_h, grid.orig_w, c);
  for (int index = 0; index < grid.count(); ++index) {
    const int oy = grid.patch_y(index), ox = grid.patch_x(index);
    const int hh = std::min(grid.patch_size, grid.orig_h - oy);
    const int ww = std::min(grid.patch_size, grid.orig_w - ox);
    for (int y = 0; y < hh; ++y) {
      const T* src = &patches[index].at(y, 0);
      std::copy(src, src + static_cast<std::size_t>(ww) * c, &out.at(oy + y, ox));
    }
  }
  return out;
}

}  // namespace glandseg
