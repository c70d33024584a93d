#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "glandseg/image.hpp"

namespace glandseg {

/// An RGB histology frame with its instance-labelled annotation.
struct ImageSample {
  std::string id;
  RgbImage image;          // H x W x 3
  LabelMap instance_mask;  // H x W, labels contiguous 0..K after normalisation
};

/// Per-pixel training targets for the two decoder heads.
struct TargetPair {
  BinaryMask gland;
  BinaryMask contour;
  int band_width = 2;
};

struct DatasetSplit {
  std::vector<ImageSample> train;
  std::vector<ImageSample> test;
};

/// Explicit train/test assignment by sample id (file stem, e.g. "train_12").
/// When absent the file-name prefix decides: train_* -> train, testA_* / testB_* -> test.
struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Reads a manifest from JSON ({"train": [...], "test": [...]}) or INI-style
/// text with `train = a, b` / `test = c` lines.
SplitManifest read_split_manifest(const std::filesystem::path& path);

/// Loads a Warwick-QU style directory: <prefix>_<k>.{bmp,png} paired with
/// <prefix>_<k>_anno.{bmp,png}. Labels are renumbered to 1..K.
DatasetSplit load_dataset(const std::filesystem::path& root,
                          const std::optional<SplitManifest>& manifest = std::nullopt);

/// Writes samples in the same layout (PNG). Annotations are 8-bit when every
/// label fits, 16-bit otherwise.
void save_dataset(const DatasetSplit& split, const std::filesystem::path& root);
void save_sample(const ImageSample& sample, const std::filesystem::path& root);

/// Maps the distinct non-zero labels of `mask` onto 1..K in increasing order.
LabelMap renumber_labels(const LabelMap& mask);
int max_label(const LabelMap& mask);

/// gland = instance > 0; contour = pixels within Chebyshev distance
/// `band_width` of a pixel carrying a different label (background included).
TargetPair derive_targets(const ImageSample& sample, int band_width);
TargetPair derive_targets(const LabelMap& instance_mask, int band_width);

/// Synthetic H&E-like frames: 1..6 disjoint elliptical glands with a dark
/// nuclear rim and a pale lumen on textured stroma. floor(n * test_fraction)
/// samples go to the test split. Deterministic for a fixed seed.
DatasetSplit generate_synthetic(int n, int height, int width, std::uint64_t seed,
                                double test_fraction = 1.0 / 3.0);
ImageSample generate_synthetic_sample(const std::string& id, int height, int width,
                                      std::uint64_t seed);

// Codec helpers shared with the CLI.
RgbImage read_rgb(const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);
void write_rgb(const RgbImage& image, const std::filesystem::path& path);
/// Single-channel 8-bit PNG.
void write_gray8(const Image<std::uint8_t>& image, const std::filesystem::path& path);
/// Label map as 16-bit grayscale PNG (label = pixel value).
void write_labels16(const LabelMap& labels, const std::filesystem::path& path);

}  // namespace glandseg
