#include "glandseg/tiling.hpp"

namespace glandseg {

PadMode parse_pad_mode(const std::string& s) {
  if (s == "reflect") return PadMode::kReflect;
  if (s == "zero") return PadMode::kZero;
  throw InputError("unknown pad_mode '" + s + "' (expected reflect or zero)");
}

std::string to_string(PadMode mode) { return mode == PadMode::kReflect ? "reflect" : "zero"; }

PatchGrid make_grid(int height, int width, int patch_size, PadMode pad_mode) {
  if (height < 1 || width < 1) throw ShapeError("cannot tile an empty image");
  if (patch_size < 32) throw InputError("patch_size must be >= 32");
  PatchGrid g;
  g.orig_h = height;
  g.orig_w = width;
  g.patch_size = patch_size;
  g.rows = (height + patch_size - 1) / patch_size;
  g.cols = (width + patch_size - 1) / patch_size;
  g.pad_h = g.rows * patch_size - height;
  g.pad_w = g.cols * patch_size - width;
  g.pad_mode = pad_mode;
  return g;
}

int mirror_index(int i, int n) {
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

}  // namespace glandseg
