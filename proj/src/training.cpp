#include "glandseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace glandseg {
namespace {

template <typename T>
void require_same_size(std::span<const T> a, std::span<const T> b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
}

template <typename T>
std::vector<T> gather_channel(const Tensor<T>& t, int channel) {
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(t.n()) * t.plane_size());
  for (int n = 0; n < t.n(); ++n) {
    const T* p = t.plane(n, channel);
    out.insert(out.end(), p, p + t.plane_size());
  }
  return out;
}

template <typename T>
void scatter_channel(const std::vector<T>& values, int channel, Tensor<T>& t) {
  const std::size_t hw = t.plane_size();
  for (int n = 0; n < t.n(); ++n) {
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(n * hw),
              values.begin() + static_cast<std::ptrdiff_t>((n + 1) * hw), t.plane(n, channel));
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw InputError("epochs must be >= 1");
  if (batch_size < 1) throw InputError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw InputError("lr must be positive");
  if (!(rho > 0.0 && rho < 1.0)) throw InputError("rho must be in (0, 1)");
  if (!(eps >= 0.0)) throw InputError("eps must be non-negative");
  if (!(dice_smooth > 0.0)) throw InputError("dice_smooth must be positive");
  if (head_weight_gland < 0.0 || head_weight_contour < 0.0) throw InputError("head weights must be >= 0");
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
double bce(std::span<const T> pred, std::span<const T> target) {
  require_same_size(pred, target, "bce");
  if (pred.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), kBceClamp, 1.0 - kBceClamp);
    const double t = target[i];
    sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  return sum / static_cast<double>(pred.size());
}

template <typename T>
double soft_dice(std::span<const T> pred, std::span<const T> target, double smooth) {
  require_same_size(pred, target, "soft_dice");
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += static_cast<double>(pred[i]) * target[i];
    sp += pred[i];
    st += target[i];
  }
  return (2.0 * inter + smooth) / (sp + st + smooth);
}

template <typename T>
double head_loss(std::span<const T> pred, std::span<const T> target, double smooth) {
  return bce(pred, target) + (1.0 - soft_dice(pred, target, smooth));
}

template <typename T>
double head_loss_grad(std::span<const T> pred, std::span<const T> target, double smooth, double scale,
                      std::span<T> grad) {
  require_same_size(pred, target, "head_loss");
  if (grad.size() != pred.size()) throw ShapeError("head_loss: gradient buffer size mismatch");
  const double m = static_cast<double>(pred.size());
  double inter = 0.0, sp = 0.0, st = 0.0, bce_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], t = target[i];
    inter += p * t;
    sp += p;
    st += t;
    const double pc = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
    bce_sum -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
  }
  const double num = 2.0 * inter + smooth;
  const double den = sp + st + smooth;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], t = target[i];
    double g_bce = 0.0;
    if (p > kBceClamp && p < 1.0 - kBceClamp) g_bce = (-t / p + (1.0 - t) / (1.0 - p)) / m;
    const double g_dice = -(2.0 * t * den - num) / (den * den);
    grad[i] = static_cast<T>(scale * (g_bce + g_dice));
  }
  return (m > 0 ? bce_sum / m : 0.0) + (1.0 - num / den);
}

template <typename T>
double two_channel_head_loss(const Tensor<T>& probs, const Tensor<T>& target, double smooth, double scale,
                             Tensor<T>* grad) {
  if (probs.c() != 2 || target.c() != 1 || probs.n() != target.n() || probs.h() != target.h() ||
      probs.w() != target.w()) {
    throw ShapeError("head loss: prediction " + probs.shape_string() + " vs target " + target.shape_string());
  }
  const auto t = gather_channel(target, 0);
  std::vector<T> t_bg(t.size());
  std::transform(t.begin(), t.end(), t_bg.begin(), [](T v) { return T(1) - v; });
  const auto fg = gather_channel(probs, 1);
  const auto bg = gather_channel(probs, 0);
  if (!grad) {
    return 0.5 * (head_loss<T>(fg, t, smooth) + head_loss<T>(bg, t_bg, smooth));
  }
  *grad = Tensor<T>(probs.n(), 2, probs.h(), probs.w());
  std::vector<T> g_fg(fg.size()), g_bg(bg.size());
  const double loss = 0.5 * (head_loss_grad<T>(fg, t, smooth, 0.5 * scale, g_fg) +
                             head_loss_grad<T>(bg, t_bg, smooth, 0.5 * scale, g_bg));
  scatter_channel(g_fg, 1, *grad);
  scatter_channel(g_bg, 0, *grad);
  return loss;
}

template <typename T>
LossBreakdown composite_loss(const typename UNet<T>::Output& out, const Tensor<T>& gland_target,
                             const Tensor<T>& contour_target, const TrainConfig& cfg, Tensor<T>* d_gland,
                             Tensor<T>* d_contour) {
  const bool with_grad = d_gland && d_contour;
  LossBreakdown l;
  l.gland = two_channel_head_loss(out.gland, gland_target, cfg.dice_smooth, cfg.head_weight_gland,
                                  with_grad ? d_gland : nullptr);
  l.contour = two_channel_head_loss(out.contour, contour_target, cfg.dice_smooth, cfg.head_weight_contour,
                                    with_grad ? d_contour : nullptr);
  l.total = cfg.head_weight_gland * l.gland + cfg.head_weight_contour * l.contour;
  return l;
}

template <typename T>
double thresholded_dice(std::span<const T> pred, std::span<const T> target) {
  require_same_size(pred, target, "dice");
  std::size_t inter = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= T(0.5);
    const bool t = target[i] >= T(0.5);
    inter += p && t;
    np += p;
    nt += t;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

// ---------------------------------------------------------------------------
// RMSprop

template <typename T>
OptimizerState<T> make_optimizer_state(const ParamSet<T>& weights) {
  return {weights.like(T(0)), 0};
}

template <typename T>
void rmsprop_step(ParamSet<T>& weights, const ParamSet<T>& grads, OptimizerState<T>& state,
                  const TrainConfig& cfg) {
  if (!weights.same_layout(grads) || !weights.same_layout(state.mean_square)) {
    throw ShapeError("rmsprop: parameter, gradient and state layouts differ");
  }
  for (const auto& g : grads) {
    for (const T v : g.values) {
      if (!std::isfinite(v)) throw NumericalError("non-finite gradient for parameter " + g.name);
    }
  }
  for (int i = 0; i < weights.size(); ++i) {
    auto& p = weights[i].values;
    const auto& g = grads[i].values;
    auto& v = state.mean_square[i].values;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double vj = cfg.rho * v[j] + (1.0 - cfg.rho) * gj * gj;
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - cfg.lr * gj / (std::sqrt(vj) + cfg.eps));
    }
  }
  ++state.step;
}

// ---------------------------------------------------------------------------
// Training loop

std::vector<TrainingPatch> make_training_patches(const std::vector<TrainingSample>& samples, int patch_size,
                                                 PadMode pad_mode) {
  std::vector<TrainingPatch> out;
  for (const auto& s : samples) {
    auto img = split(s.image, patch_size, pad_mode);
    auto gland = split(s.targets.gland, patch_size, pad_mode);
    auto contour = split(s.targets.contour, patch_size, pad_mode);
    for (std::size_t i = 0; i < img.patches.size(); ++i) {
      out.push_back({std::move(img.patches[i]), std::move(gland.patches[i]), std::move(contour.patches[i])});
    }
  }
  return out;
}

std::string loss_csv_header() { return "epoch,step,loss_total,loss_gland,loss_contour,pixel_dice"; }

std::string loss_csv_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.9g,%.9g", r.epoch, r.step, r.loss_total, r.loss_gland,
                r.loss_contour, r.pixel_dice);
  return buf;
}

namespace {

Tensor<float> mask_tensor(const std::vector<const BinaryMask*>& masks) {
  const int h = masks.front()->height(), w = masks.front()->width();
  Tensor<float> t(static_cast<int>(masks.size()), 1, h, w);
  for (int n = 0; n < t.n(); ++n) {
    const auto& m = *masks[static_cast<std::size_t>(n)];
    std::transform(m.values().begin(), m.values().end(), t.plane(n, 0),
                   [](std::uint8_t v) { return v ? 1.0f : 0.0f; });
  }
  return t;
}

}  // namespace

TrainResult train(const std::vector<TrainingPatch>& patches, const NetworkConfig& net_cfg, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  const UNet<float> net(net_cfg);
  if (patches.empty()) throw InputError("no training patches");
  for (const auto& p : patches) {
    if (!p.image.same_shape(net_cfg.input_size, net_cfg.input_size, net_cfg.channels_in) ||
        !p.gland.same_extent(p.image) || !p.contour.same_extent(p.image)) {
      throw ShapeError("training patches must be " + std::to_string(net_cfg.input_size) + " squares");
    }
  }

  TrainResult result;
  result.params = net.init_params(cfg.seed);
  auto state = make_optimizer_state(result.params.weights);
  std::mt19937_64 order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  std::ofstream csv;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir);
    csv.open(options.output_dir / "loss_log.csv", std::ios::trunc);
    if (!csv) throw Error("cannot write " + (options.output_dir / "loss_log.csv").string());
    csv << loss_csv_header() << "\n";
  }

  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  int step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochSummary summary{epoch, 0.0, 0.0};
    int steps_in_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      std::vector<const RgbImage*> images;
      std::vector<const BinaryMask*> glands, contours;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& p = patches[order[i]];
        images.push_back(&p.image);
        glands.push_back(&p.gland);
        contours.push_back(&p.contour);
      }
      const auto x = to_input_tensor<float>(images);
      const auto tg = mask_tensor(glands);
      const auto tc = mask_tensor(contours);

      UNet<float>::Cache cache;
      const auto out = net.forward(result.params, x, Mode::kTrain, &cache);
      Tensor<float> dg, dc;
      const auto loss = composite_loss<float>(out, tg, tc, cfg, &dg, &dc);
      ++step;
      if (!std::isfinite(loss.total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + "; the last completed epoch's checkpoint is retained");
      }
      const auto grads = net.backward(result.params, cache, dg, dc);
      rmsprop_step(result.params.weights, grads, state, cfg);

      const auto fg = [&] {
        std::vector<float> v;
        for (int n = 0; n < out.gland.n(); ++n) {
          const float* p = out.gland.plane(n, UNet<float>::kForeground);
          v.insert(v.end(), p, p + out.gland.plane_size());
        }
        return v;
      }();
      StepRecord rec{epoch, step, loss.total, loss.gland, loss.contour,
                     thresholded_dice<float>(fg, tg.values())};
      result.log.steps.push_back(rec);
      summary.mean_loss += rec.loss_total;
      summary.mean_pixel_dice += rec.pixel_dice;
      ++steps_in_epoch;
      if (csv.is_open()) csv << loss_csv_row(rec) << "\n";
      if (options.on_step) options.on_step(rec);
    }
    summary.mean_loss /= steps_in_epoch;
    summary.mean_pixel_dice /= steps_in_epoch;
    result.log.epochs.push_back(summary);
    if (csv.is_open()) csv.flush();
    if (!options.output_dir.empty()) {
      save_checkpoint(result.params, options.output_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".gsck"));
      save_checkpoint(result.params, options.output_dir / "checkpoint.gsck");
    }
    if (options.on_epoch) options.on_epoch(summary);
  }
  return result;
}

#define GLANDSEG_INSTANTIATE_TRAINING(T)                                                                   \
  template double bce(std::span<const T>, std::span<const T>);                                             \
  template double soft_dice(std::span<const T>, std::span<const T>, double);                               \
  template double head_loss(std::span<const T>, std::span<const T>, double);                               \
  template double head_loss_grad(std::span<const T>, std::span<const T>, double, double, std::span<T>);     \
  template double two_channel_head_loss(const Tensor<T>&, const Tensor<T>&, double, double, Tensor<T>*);   \
  template LossBreakdown composite_loss<T>(const UNet<T>::Output&, const Tensor<T>&, const Tensor<T>&,     \
                                           const TrainConfig&, Tensor<T>*, Tensor<T>*);                    \
  template double thresholded_dice(std::span<const T>, std::span<const T>);                                \
  template OptimizerState<T> make_optimizer_state(const ParamSet<T>&);                                     \
  template void rmsprop_step(ParamSet<T>&, const ParamSet<T>&, OptimizerState<T>&, const TrainConfig&);

GLANDSEG_INSTANTIATE_TRAINING(float)
GLANDSEG_INSTANTIATE_TRAINING(double)

#undef GLANDSEG_INSTANTIATE_TRAINING

}  // namespace glandseg
