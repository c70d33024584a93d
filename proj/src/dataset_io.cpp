#include "glandseg/dataset_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace fs = std::filesystem;

namespace glandseg {
namespace {

bool is_image_ext(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".bmp" || ext == ".png";
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Orders "train_2" before "train_10".
struct NaturalIdLess {
  bool operator()(const std::string& a, const std::string& b) const {
    static const std::regex re(R"(^(.*?)(\d+)$)");
    std::smatch ma, mb;
    if (std::regex_match(a, ma, re) && std::regex_match(b, mb, re) && ma[1] == mb[1]) {
      const auto na = std::stoll(ma[2]);
      const auto nb = std::stoll(mb[2]);
      if (na != nb) return na < nb;
    }
    return a < b;
  }
};

enum class Side { kTrain, kTest, kNone };

Side side_from_prefix(const std::string& stem) {
  static const std::regex re(R"(^(train|testA|testB)_\d+$)");
  std::smatch m;
  if (!std::regex_match(stem, m, re)) return Side::kNone;
  return m[1] == "train" ? Side::kTrain : Side::kTest;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

ImageSample load_sample(const std::string& id, const fs::path& image_path, const fs::path& anno_path) {
  ImageSample s;
  s.id = id;
  s.image = read_rgb(image_path);
  LabelMap raw = read_labels(anno_path);
  if (!raw.same_extent(s.image)) {
    throw InputError("size mismatch between " + image_path.string() + " (" +
                     std::to_string(s.image.height()) + "x" + std::to_string(s.image.width()) +
                     ") and " + anno_path.string() + " (" + std::to_string(raw.height()) + "x" +
                     std::to_string(raw.width()) + ")");
  }
  s.instance_mask = renumber_labels(raw);
  return s;
}

// Separable sliding-window min and max over a (2r+1)^2 square clipped to the image.
void window_min_max(const LabelMap& in, int r, LabelMap& mn, LabelMap& mx) {
  const int h = in.height(), w = in.width();
  LabelMap tmin(h, w), tmax(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int lo = in.at(y, x), hi = lo;
      for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
        lo = std::min(lo, in.at(y, xx));
        hi = std::max(hi, in.at(y, xx));
      }
      tmin.at(y, x) = lo;
      tmax.at(y, x) = hi;
    }
  }
  mn = LabelMap(h, w);
  mx = LabelMap(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int lo = tmin.at(y, x), hi = tmax.at(y, x);
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
        lo = std::min(lo, tmin.at(yy, x));
        hi = std::max(hi, tmax.at(yy, x));
      }
      mn.at(y, x) = lo;
      mx.at(y, x) = hi;
    }
  }
}

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

// ---------------------------------------------------------------------------
// Codecs

RgbImage read_rgb(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw InputError("cannot read image " + path.string());
  RgbImage out(bgr.rows, bgr.cols, 3);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      out.at(y, x, 0) = row[x][2];
      out.at(y, x, 1) = row[x][1];
      out.at(y, x, 2) = row[x][0];
    }
  }
  return out;
}

LabelMap read_labels(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw InputError("cannot read annotation " + path.string());
  if (m.channels() > 1) {
    // Palette or RGB-encoded annotations carry the label in every channel.
    cv::Mat first;
    cv::extractChannel(m, first, 0);
    m = first;
  }
  if (m.depth() != CV_8U && m.depth() != CV_16U) {
    throw InputError("unsupported annotation bit depth in " + path.string());
  }
  cv::Mat m32;
  m.convertTo(m32, CV_32S);
  LabelMap out(m32.rows, m32.cols);
  for (int y = 0; y < m32.rows; ++y) {
    const auto* row = m32.ptr<std::int32_t>(y);
    std::copy(row, row + m32.cols, &out.at(y, 0));
  }
  return out;
}

void write_rgb(const RgbImage& image, const fs::path& path) {
  if (image.channels() != 3) throw ShapeError("write_rgb expects 3 channels");
  cv::Mat bgr(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      row[x] = cv::Vec3b(image.at(y, x, 2), image.at(y, x, 1), image.at(y, x, 0));
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write " + path.string());
}

void write_gray8(const Image<std::uint8_t>& image, const fs::path& path) {
  if (image.channels() != 1) throw ShapeError("write_gray8 expects 1 channel");
  cv::Mat m(image.height(), image.width(), CV_8UC1, const_cast<std::uint8_t*>(image.data()));
  if (!cv::imwrite(path.string(), m)) throw Error("cannot write " + path.string());
}

void write_labels16(const LabelMap& labels, const fs::path& path) {
  cv::Mat m(labels.height(), labels.width(), CV_16UC1);
  for (int y = 0; y < labels.height(); ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < labels.width(); ++x) {
      const int v = labels.at(y, x);
      if (v < 0 || v > 65535) throw Error("label out of 16-bit range in " + path.string());
      row[x] = static_cast<std::uint16_t>(v);
    }
  }
  if (!cv::imwrite(path.string(), m)) throw Error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Dataset layout

SplitManifest read_split_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open split manifest " + path.string());
  SplitManifest m;
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      in >> j;
      m.train = j.value("train", std::vector<std::string>{});
      m.test = j.value("test", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
      throw InputError("malformed split manifest " + path.string() + ": " + e.what());
    }
    return m;
  }
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto items = split_list(line.substr(eq + 1));
    if (key == "train") {
      m.train.insert(m.train.end(), items.begin(), items.end());
    } else if (key == "test") {
      m.test.insert(m.test.end(), items.begin(), items.end());
    } else {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  return m;
}

DatasetSplit load_dataset(const fs::path& root, const std::optional<SplitManifest>& manifest) {
  if (!fs::is_directory(root)) throw InputError("dataset directory not found: " + root.string());

  std::map<std::string, fs::path, NaturalIdLess> images;
  std::map<std::string, fs::path> annos;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_regular_file() || !is_image_ext(entry.path())) continue;
    const auto stem = entry.path().stem().string();
    if (ends_with(stem, "_anno")) {
      annos[stem.substr(0, stem.size() - 5)] = entry.path();
    } else {
      images[stem] = entry.path();
    }
  }

  std::vector<std::string> train_ids, test_ids;
  if (manifest) {
    std::set<std::string> seen;
    for (const auto* list : {&manifest->train, &manifest->test}) {
      for (const auto& id : *list) {
        if (!seen.insert(id).second) throw InputError("split manifest lists '" + id + "' twice");
        if (!images.contains(id)) throw InputError("split manifest names missing image '" + id + "'");
      }
    }
    train_ids = manifest->train;
    test_ids = manifest->test;
  } else {
    for (const auto& [id, path] : images) {
      switch (side_from_prefix(id)) {
        case Side::kTrain: train_ids.push_back(id); break;
        case Side::kTest: test_ids.push_back(id); break;
        case Side::kNone: break;
      }
    }
  }
  if (train_ids.empty() && test_ids.empty()) {
    throw InputError("no samples found in " + root.string());
  }

  auto load_all = [&](const std::vector<std::string>& ids) {
    std::vector<ImageSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      const auto anno = annos.find(id);
      if (anno == annos.end()) {
        throw InputError("missing annotation for " + images.at(id).string());
      }
      out.push_back(load_sample(id, images.at(id), anno->second));
    }
    return out;
  };
  DatasetSplit split;
  split.train = load_all(train_ids);
  split.test = load_all(test_ids);
  return split;
}

void save_sample(const ImageSample& sample, const fs::path& root) {
  write_rgb(sample.image, root / (sample.id + ".png"));
  const int k = max_label(sample.instance_mask);
  if (k <= 255) {
    Image<std::uint8_t> anno(sample.instance_mask.height(), sample.instance_mask.width());
    std::transform(sample.instance_mask.values().begin(), sample.instance_mask.values().end(),
                   anno.values().begin(), [](std::int32_t v) { return static_cast<std::uint8_t>(v); });
    write_gray8(anno, root / (sample.id + "_anno.png"));
  } else {
    write_labels16(sample.instance_mask, root / (sample.id + "_anno.png"));
  }
}

void save_dataset(const DatasetSplit& split, const fs::path& root) {
  fs::create_directories(root);
  for (const auto& s : split.train) save_sample(s, root);
  for (const auto& s : split.test) save_sample(s, root);
}

// ---------------------------------------------------------------------------
// Targets

int max_label(const LabelMap& mask) {
  int k = 0;
  for (const auto v : mask.values()) k = std::max(k, v);
  return k;
}

LabelMap renumber_labels(const LabelMap& mask) {
  std::set<std::int32_t> distinct;
  for (const auto v : mask.values()) {
    if (v < 0) throw InputError("negative instance label");
    if (v > 0) distinct.insert(v);
  }
  std::map<std::int32_t, std::int32_t> remap;
  std::int32_t next = 1;
  for (const auto v : distinct) remap[v] = next++;
  LabelMap out(mask.height(), mask.width());
  std::transform(mask.values().begin(), mask.values().end(), out.values().begin(),
                 [&](std::int32_t v) { return v == 0 ? 0 : remap[v]; });
  return out;
}

TargetPair derive_targets(const LabelMap& instance_mask, int band_width) {
  if (band_width < 1) throw InputError("band_width must be >= 1");
  const int h = instance_mask.height(), w = instance_mask.width();
  TargetPair t;
  t.band_width = band_width;
  t.gland = BinaryMask(h, w);
  t.contour = BinaryMask(h, w);
  LabelMap mn, mx;
  window_min_max(instance_mask, band_width, mn, mx);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      t.gland.at(y, x) = instance_mask.at(y, x) > 0 ? 1 : 0;
      // The window contains p itself, so a non-uniform window means some
      // pixel within reach carries a label different from p's.
      t.contour.at(y, x) = mn.at(y, x) != mx.at(y, x) ? 1 : 0;
    }
  }
  return t;
}

TargetPair derive_targets(const ImageSample& sample, int band_width) {
  return derive_targets(sample.instance_mask, band_width);
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Ellipse {
  double cx, cy, a, b, theta;
  double radius2(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    return u * u + v * v;
  }
};

// Smooth value noise: random lattice of `cell` pixel spacing, bilinearly interpolated.
std::vector<double> value_noise(int h, int w, int cell, std::mt19937_64& rng) {
  const int gh = h / cell + 2, gw = w / cell + 2;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (auto& g : grid) g = u(rng);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const int iy = static_cast<int>(fy);
    const double ty = fy - iy;
    for (int x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const int ix = static_cast<int>(fx);
      const double tx = fx - ix;
      const double v00 = grid[iy * gw + ix], v01 = grid[iy * gw + ix + 1];
      const double v10 = grid[(iy + 1) * gw + ix], v11 = grid[(iy + 1) * gw + ix + 1];
      out[static_cast<std::size_t>(y) * w + x] =
          (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
    }
  }
  return out;
}

}  // namespace

ImageSample generate_synthetic_sample(const std::string& id, int height, int width, std::uint64_t seed) {
  if (height < 32 || width < 32) throw InputError("synthetic frames must be at least 32x32");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  ImageSample s;
  s.id = id;
  s.instance_mask = LabelMap(height, width);
  const double frame = std::sqrt(static_cast<double>(height) * width);
  const double max_axis = 0.4 * std::min(height, width);
  const double total = static_cast<double>(height) * width;
  constexpr int kGap = 2;          // minimum Chebyshev gap between glands
  constexpr double kMaxFill = 0.55;

  const int wanted = 1 + static_cast<int>(unit(rng) * 6.0);
  std::vector<Ellipse> glands;
  std::size_t filled = 0;
  for (int attempt = 0; attempt < 300 && static_cast<int>(glands.size()) < wanted; ++attempt) {
    Ellipse e{};
    e.a = std::min(max_axis, uniform(0.14, 0.24) * frame);
    e.b = std::min(max_axis, uniform(0.14, 0.24) * frame);
    e.theta = uniform(0.0, std::numbers::pi);
    const double reach = std::max(e.a, e.b) + kGap;
    if (2 * reach >= width || 2 * reach >= height) continue;
    e.cx = uniform(reach, width - 1 - reach);
    e.cy = uniform(reach, height - 1 - reach);

    const int x0 = std::max(0, static_cast<int>(e.cx - reach) - 1);
    const int x1 = std::min(width - 1, static_cast<int>(e.cx + reach) + 1);
    const int y0 = std::max(0, static_cast<int>(e.cy - reach) - 1);
    const int y1 = std::min(height - 1, static_cast<int>(e.cy + reach) + 1);
    std::vector<std::pair<int, int>> pixels;
    bool clash = false;
    for (int y = y0; y <= y1 && !clash; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (e.radius2(x, y) > 1.0) continue;
        for (int yy = std::max(0, y - kGap); yy <= std::min(height - 1, y + kGap) && !clash; ++yy) {
          for (int xx = std::max(0, x - kGap); xx <= std::min(width - 1, x + kGap); ++xx) {
            if (s.instance_mask.at(yy, xx) != 0) {
              clash = true;
              break;
            }
          }
        }
        if (clash) break;
        pixels.emplace_back(y, x);
      }
    }
    if (clash || pixels.empty()) continue;
    if (!glands.empty() && (filled + pixels.size()) / total > kMaxFill) continue;
    glands.push_back(e);
    filled += pixels.size();
    const auto label = static_cast<std::int32_t>(glands.size());
    for (const auto& [y, x] : pixels) s.instance_mask.at(y, x) = label;
  }

  // Stroma: pink eosin tone with two octaves of texture and sparse stray nuclei.
  const auto coarse = value_noise(height, width, 24, rng);
  const auto fine = value_noise(height, width, 5, rng);
  std::normal_distribution<double> grain(0.0, 6.0);
  s.image = RgbImage(height, width, 3);
  const double stroma[3] = {228, 168, 196};
  const double nuclei[3] = {92, 58, 140};
  const double lumen[3] = {246, 238, 244};
  std::vector<double> ring(glands.size());
  for (std::size_t g = 0; g < glands.size(); ++g) ring[g] = uniform(0.55, 0.72);

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      const double tex = 14.0 * coarse[i] + 8.0 * fine[i];
      const int label = s.instance_mask.at(y, x);
      const double* base = stroma;
      if (label > 0) {
        const auto& e = glands[label - 1];
        base = e.radius2(x, y) > ring[label - 1] * ring[label - 1] ? nuclei : lumen;
      }
      for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = clamp_u8(base[c] + tex + grain(rng));
    }
  }
  const int strays = static_cast<int>(total / 900.0);
  for (int k = 0; k < strays; ++k) {
    const int cy = static_cast<int>(unit(rng) * height);
    const int cx = static_cast<int>(unit(rng) * width);
    if (s.instance_mask.at(cy, cx) != 0) continue;
    for (int y = std::max(0, cy - 1); y <= std::min(height - 1, cy + 1); ++y) {
      for (int x = std::max(0, cx - 1); x <= std::min(width - 1, cx + 1); ++x) {
        if (s.instance_mask.at(y, x) != 0) continue;
        for (int c = 0; c < 3; ++c) {
          s.image.at(y, x, c) = clamp_u8(0.5 * s.image.at(y, x, c) + 0.5 * nuclei[c]);
        }
      }
    }
  }
  return s;
}

DatasetSplit generate_synthetic(int n, int height, int width, std::uint64_t seed, double test_fraction) {
  if (n < 1) throw InputError("synthetic sample count must be >= 1");
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw InputError("test_fraction must be in [0, 1)");
  const int n_test = static_cast<int>(std::floor(n * test_fraction));
  const int n_train = n - n_test;
  DatasetSplit split;
  for (int i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), 0x67u};
    std::uint64_t sample_seed = 0;
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    sample_seed = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    if (i < n_train) {
      split.train.push_back(
          generate_synthetic_sample("train_" + std::to_string(i + 1), height, width, sample_seed));
    } else {
      split.test.push_back(generate_synthetic_sample("testA_" + std::to_string(i - n_train + 1), height,
                                                     width, sample_seed));
    }
  }
  return split;
}

}  // namespace glandseg
