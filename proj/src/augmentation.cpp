#include "glandseg/augmentation.hpp"

#include <cmath>
#include <numbers>

#include "glandseg/tiling.hpp"

namespace glandseg {
namespace {

// Maps destination pixel centres back to source coordinates.
struct InverseAffine {
  double m00, m01, m10, m11;
  double ox, oy;

  InverseAffine(const AffineParams& p, int height, int width) {
    const double cx = (width - 1) / 2.0;
    const double cy = (height - 1) / 2.0;
    const double theta = p.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    const double fx = p.flip_h ? -1.0 : 1.0;
    const double fy = p.flip_v ? -1.0 : 1.0;
    const double iz = 1.0 / p.zoom;
    // F * Z^-1 * R^T
    m00 = fx * iz * c;
    m01 = fx * iz * s;
    m10 = fy * iz * -s;
    m11 = fy * iz * c;
    ox = cx + p.shift_x;
    oy = cy + p.shift_y;
    cx_ = cx;
    cy_ = cy;
  }

  void apply(int x, int y, double& sx, double& sy) const {
    const double dx = x - ox, dy = y - oy;
    sx = cx_ + m00 * dx + m01 * dy;
    sy = cy_ + m10 * dx + m11 * dy;
  }

 private:
  double cx_, cy_;
};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void AugmentConfig::validate() const {
  if (factor < 1) throw InputError("augment factor must be >= 1");
  if (shift_frac < 0.0 || shift_frac >= 1.0) throw InputError("shift_frac must be in [0, 1)");
  if (rot_deg < 0.0 || rot_deg > 180.0) throw InputError("rot_deg must be in [0, 180]");
  if (!(zoom_min > 0.0 && zoom_min <= 1.0 && zoom_max >= 1.0)) {
    throw InputError("zoom range must be positive and contain 1.0");
  }
  for (const double p : {flip_h, flip_v}) {
    if (p < 0.0 || p > 1.0) throw InputError("flip probabilities must be in [0, 1]");
  }
}

TrainingSample make_training_sample(const ImageSample& sample, int band_width) {
  return {sample.id, sample.image, sample.instance_mask, derive_targets(sample, band_width)};
}

AffineParams draw_transform(const AugmentConfig& cfg, int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto sym = [&](double r) { return r * (2.0 * unit(rng) - 1.0); };
  AffineParams p;
  p.shift_x = sym(cfg.shift_frac * width);
  p.shift_y = sym(cfg.shift_frac * height);
  p.rotation_deg = sym(cfg.rot_deg);
  p.zoom = cfg.zoom_min + (cfg.zoom_max - cfg.zoom_min) * unit(rng);
  p.flip_h = unit(rng) < cfg.flip_h;
  p.flip_v = unit(rng) < cfg.flip_v;
  return p;
}

RgbImage warp_bilinear(const RgbImage& image, const AffineParams& params) {
  const int h = image.height(), w = image.width(), c = image.channels();
  RgbImage out(h, w, c);
  const InverseAffine inv(params, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sx, sy;
      inv.apply(x, y, sx, sy);
      const double flx = std::floor(sx), fly = std::floor(sy);
      const double tx = sx - flx, ty = sy - fly;
      const int x0 = mirror_index(static_cast<int>(flx), w), x1 = mirror_index(static_cast<int>(flx) + 1, w);
      const int y0 = mirror_index(static_cast<int>(fly), h), y1 = mirror_index(static_cast<int>(fly) + 1, h);
      for (int ch = 0; ch < c; ++ch) {
        const double top = (1.0 - tx) * image.at(y0, x0, ch) + tx * image.at(y0, x1, ch);
        const double bottom = (1.0 - tx) * image.at(y1, x0, ch) + tx * image.at(y1, x1, ch);
        const double v = (1.0 - ty) * top + ty * bottom;
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

template <typename T>
Image<T> warp_nearest(const Image<T>& mask, const AffineParams& params) {
  const int h = mask.height(), w = mask.width(), c = mask.channels();
  Image<T> out(h, w, c);
  const InverseAffine inv(params, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sx, sy;
      inv.apply(x, y, sx, sy);
      const int ix = mirror_index(static_cast<int>(std::lround(sx)), w);
      const int iy = mirror_index(static_cast<int>(std::lround(sy)), h);
      for (int ch = 0; ch < c; ++ch) out.at(y, x, ch) = mask.at(iy, ix, ch);
    }
  }
  return out;
}

template Image<std::uint8_t> warp_nearest(const Image<std::uint8_t>&, const AffineParams&);
template Image<std::int32_t> warp_nearest(const Image<std::int32_t>&, const AffineParams&);

TrainingSample augment_sample(const TrainingSample& sample, const AffineParams& params) {
  TrainingSample out;
  out.id = sample.id;
  out.targets.band_width = sample.targets.band_width;
  if (params.is_identity()) {
    out = sample;
    return out;
  }
  out.image = warp_bilinear(sample.image, params);
  out.instance_mask = warp_nearest(sample.instance_mask, params);
  out.targets.gland = warp_nearest(sample.targets.gland, params);
  out.targets.contour = warp_nearest(sample.targets.contour, params);
  for (auto* m : {&out.targets.gland, &out.targets.contour}) {
    for (auto& v : m->values()) v = v != 0 ? 1 : 0;
  }
  return out;
}

std::mt19937_64 sample_rng(std::uint64_t seed, const std::string& id, int copy) {
  const std::uint64_t h = fnv1a(id);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(copy)};
  return std::mt19937_64(seq);
}

std::vector<TrainingSample> build_augmented_set(const DatasetSplit& split, const AugmentConfig& cfg,
                                                int band_width) {
  cfg.validate();
  std::vector<TrainingSample> out;
  out.reserve(split.train.size() * cfg.factor);
  for (const auto& sample : split.train) {
    const auto base = make_training_sample(sample, band_width);
    out.push_back(base);
    for (int k = 1; k < cfg.factor; ++k) {
      auto rng = sample_rng(cfg.seed, sample.id, k);
      auto aug = augment_sample(base, draw_transform(cfg, base.image.height(), base.image.width(), rng));
      aug.id = sample.id + "_aug" + std::to_string(k);
      out.push_back(std::move(aug));
    }
  }
  return out;
}

}  // namespace glandseg
