#include "glandseg/cli.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

namespace fs = std::filesystem;

namespace glandseg {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw InputError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) {
    throw InputError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw InputError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

class Logger {
 public:
  explicit Logger(bool verbose) : verbose_(verbose) {}
  template <typename... Args>
  void info(const char* fmt, Args... args) const {
    if (!verbose_) return;
    std::fprintf(stderr, "[glandseg] ");
    if constexpr (sizeof...(Args) == 0) {
      std::fputs(fmt, stderr);
    } else {
      std::fprintf(stderr, fmt, args...);
    }
    std::fputc('\n', stderr);
  }

 private:
  bool verbose_;
};

// Exclusive marker preventing two commands from writing one output directory.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".glandseg.lock") {
    fs::create_directories(dir);
    file_ = std::fopen(path_.c_str(), "wx");
    if (!file_) {
      throw InputError("output directory " + dir.string() + " is locked by another run (remove " +
                       path_.string() + " if stale)");
    }
  }
  ~OutputLock() {
    std::fclose(file_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  std::FILE* file_ = nullptr;
};

int guarded(const char* command, const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const InputError& e) {
    std::cerr << "glandseg " << command << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "glandseg " << command << ": " << e.what() << "\n";
    return kExitFailure;
  }
}

fs::path output_dir(const RunConfig& cfg, const CommandOptions& opts) {
  const fs::path dir = opts.out ? *opts.out : cfg.output_dir;
  if (dir.empty()) throw InputError("no output directory (set output_dir or pass --out)");
  return dir;
}

void require_dir(const fs::path& p, const char* key) {
  if (p.empty()) throw InputError(std::string(key) + " is not set");
  if (!fs::is_directory(p)) throw InputError(std::string(key) + " not found: " + p.string());
}

std::optional<SplitManifest> manifest_of(const RunConfig& cfg) {
  if (cfg.split_manifest.empty()) return std::nullopt;
  return read_split_manifest(cfg.split_manifest);
}

Image<std::uint8_t> quantize(const ProbabilityMap& p) {
  Image<std::uint8_t> out(p.height(), p.width());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.data()[i] = static_cast<std::uint8_t>(std::lround(std::clamp(p.data()[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

RgbImage gray_to_rgb(const Image<std::uint8_t>& g) {
  RgbImage out(g.height(), g.width(), 3);
  for (int y = 0; y < g.height(); ++y) {
    for (int x = 0; x < g.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = g.at(y, x);
    }
  }
  return out;
}

RgbImage hconcat(const std::vector<const RgbImage*>& parts) {
  int w = 0;
  for (const auto* p : parts) w += p->width();
  RgbImage out(parts.front()->height(), w, 3);
  int x0 = 0;
  for (const auto* p : parts) {
    for (int y = 0; y < p->height(); ++y) {
      std::copy(&p->at(y, 0), &p->at(y, 0) + static_cast<std::size_t>(p->width()) * 3, &out.at(y, x0));
    }
    x0 += p->width();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig c;
  using Setter = std::function<void(const std::string& key, const std::string& value)>;
  const std::map<std::string, Setter> setters = {
      {"dataset_root", [&](auto&, auto& v) { c.dataset_root = v; }},
      {"output_dir", [&](auto&, auto& v) { c.output_dir = v; }},
      {"checkpoint", [&](auto&, auto& v) { c.checkpoint = v; }},
      {"predictions_dir", [&](auto&, auto& v) { c.predictions_dir = v; }},
      {"split_manifest", [&](auto&, auto& v) { c.split_manifest = v; }},
      {"depth", [&](auto& k, auto& v) { c.network.depth = parse_int<int>(k, v); }},
      {"base_filters", [&](auto& k, auto& v) { c.network.base_filters = parse_int<int>(k, v); }},
      {"kernel", [&](auto& k, auto& v) { c.network.kernel = parse_int<int>(k, v); }},
      {"input_size", [&](auto& k, auto& v) { c.network.input_size = parse_int<int>(k, v); }},
      {"channels_in", [&](auto& k, auto& v) { c.network.channels_in = parse_int<int>(k, v); }},
      {"bn_momentum", [&](auto& k, auto& v) { c.network.bn_momentum = parse_double(k, v); }},
      {"bn_epsilon", [&](auto& k, auto& v) { c.network.bn_epsilon = parse_double(k, v); }},
      {"epochs", [&](auto& k, auto& v) { c.train.epochs = parse_int<int>(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.train.batch_size = parse_int<int>(k, v); }},
      {"lr", [&](auto& k, auto& v) { c.train.lr = parse_double(k, v); }},
      {"rho", [&](auto& k, auto& v) { c.train.rho = parse_double(k, v); }},
      {"eps", [&](auto& k, auto& v) { c.train.eps = parse_double(k, v); }},
      {"dice_smooth", [&](auto& k, auto& v) { c.train.dice_smooth = parse_double(k, v); }},
      {"head_weight_gland", [&](auto& k, auto& v) { c.train.head_weight_gland = parse_double(k, v); }},
      {"head_weight_contour", [&](auto& k, auto& v) { c.train.head_weight_contour = parse_double(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.train.seed = c.augment.seed = parse_int<std::uint64_t>(k, v); }},
      {"augment_factor", [&](auto& k, auto& v) { c.augment.factor = parse_int<int>(k, v); }},
      {"shift_frac", [&](auto& k, auto& v) { c.augment.shift_frac = parse_double(k, v); }},
      {"rot_deg", [&](auto& k, auto& v) { c.augment.rot_deg = parse_double(k, v); }},
      {"zoom_min", [&](auto& k, auto& v) { c.augment.zoom_min = parse_double(k, v); }},
      {"zoom_max", [&](auto& k, auto& v) { c.augment.zoom_max = parse_double(k, v); }},
      {"flip_h", [&](auto& k, auto& v) { c.augment.flip_h = parse_double(k, v); }},
      {"flip_v", [&](auto& k, auto& v) { c.augment.flip_v = parse_double(k, v); }},
      {"band_width", [&](auto& k, auto& v) { c.band_width = parse_int<int>(k, v); }},
      {"patch_size", [&](auto& k, auto& v) { c.patch_size = parse_int<int>(k, v); }},
      {"pad_mode", [&](auto&, auto& v) { c.pad_mode = parse_pad_mode(v); }},
      {"tau_gland", [&](auto& k, auto& v) { c.fusion.tau_gland = parse_double(k, v); }},
      {"tau_contour", [&](auto& k, auto& v) { c.fusion.tau_contour = parse_double(k, v); }},
      {"min_object_px", [&](auto& k, auto& v) { c.fusion.min_object_px = parse_int<int>(k, v); }},
      {"fill_holes", [&](auto& k, auto& v) { c.fusion.fill_holes = parse_bool(k, v); }},
      {"restore_dilate_px",
       [&](auto& k, auto& v) {
         c.fusion.restore_dilate_px = parse_int<int>(k, v);
         c.restore_dilate_set_ = true;
       }},
      {"iou_match", [&](auto& k, auto& v) { c.iou_match = parse_double(k, v); }},
      {"synth_n", [&](auto& k, auto& v) { c.synth_n = parse_int<int>(k, v); }},
      {"synth_height", [&](auto& k, auto& v) { c.synth_height = parse_int<int>(k, v); }},
      {"synth_width", [&](auto& k, auto& v) { c.synth_width = parse_int<int>(k, v); }},
      {"synth_seed", [&](auto& k, auto& v) { c.synth_seed = parse_int<std::uint64_t>(k, v); }},
      {"synth_test_fraction", [&](auto& k, auto& v) { c.synth_test_fraction = parse_double(k, v); }},
  };

  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError(where + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw InputError(where + ": unknown config key '" + key + "'");
    if (!seen.insert(key).second) throw InputError(where + ": duplicate config key '" + key + "'");
    it->second(key, value);
  }
  if (!c.restore_dilate_set_) c.fusion.restore_dilate_px = c.band_width;
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  augment.validate();
  fusion.validate();
  if (band_width < 1) throw InputError("band_width must be >= 1");
  if (effective_patch_size() != network.input_size) {
    throw InputError("patch_size must equal the network input_size");
  }
  if (effective_patch_size() < 32) throw InputError("patch_size must be >= 32");
  if (!(iou_match >= 0.0 && iou_match < 1.0)) throw InputError("iou_match must be in [0, 1)");
  if (synth_n < 1) throw InputError("synth_n must be >= 1");
  if (synth_height < 32 || synth_width < 32) throw InputError("synthetic frames must be at least 32x32");
  if (synth_test_fraction < 0.0 || synth_test_fraction >= 1.0) {
    throw InputError("synth_test_fraction must be in [0, 1)");
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o.precision(17);
  o << "dataset_root = " << dataset_root.string() << "\n"
    << "output_dir = " << output_dir.string() << "\n"
    << "checkpoint = " << checkpoint.string() << "\n"
    << "predictions_dir = " << predictions_dir.string() << "\n"
    << "split_manifest = " << split_manifest.string() << "\n"
    << "depth = " << network.depth << "\nbase_filters = " << network.base_filters
    << "\nkernel = " << network.kernel << "\ninput_size = " << network.input_size
    << "\nchannels_in = " << network.channels_in << "\nbn_momentum = " << network.bn_momentum
    << "\nbn_epsilon = " << network.bn_epsilon << "\nepochs = " << train.epochs
    << "\nbatch_size = " << train.batch_size << "\nlr = " << train.lr << "\nrho = " << train.rho
    << "\neps = " << train.eps << "\ndice_smooth = " << train.dice_smooth
    << "\nhead_weight_gland = " << train.head_weight_gland
    << "\nhead_weight_contour = " << train.head_weight_contour << "\nseed = " << train.seed
    << "\naugment_factor = " << augment.factor << "\nshift_frac = " << augment.shift_frac
    << "\nrot_deg = " << augment.rot_deg << "\nzoom_min = " << augment.zoom_min
    << "\nzoom_max = " << augment.zoom_max << "\nflip_h = " << augment.flip_h << "\nflip_v = " << augment.flip_v
    << "\nband_width = " << band_width << "\npatch_size = " << effective_patch_size()
    << "\npad_mode = " << to_string(pad_mode) << "\ntau_gland = " << fusion.tau_gland
    << "\ntau_contour = " << fusion.tau_contour << "\nmin_object_px = " << fusion.min_object_px
    << "\nfill_holes = " << (fusion.fill_holes ? "true" : "false")
    << "\nrestore_dilate_px = " << fusion.restore_dilate_px << "\niou_match = " << iou_match
    << "\nsynth_n = " << synth_n << "\nsynth_height = " << synth_height << "\nsynth_width = " << synth_width
    << "\nsynth_seed = " << synth_seed << "\nsynth_test_fraction = " << synth_test_fraction << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Commands

ProbabilityPair predict_probabilities(const UNet<float>& net, const NetworkParams<float>& params,
                                      const RgbImage& image, int batch_size, PadMode pad_mode) {
  const auto tiles = split(image, net.config().input_size, pad_mode);
  std::vector<ProbabilityMap> gland, contour;
  const std::size_t batch = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t begin = 0; begin < tiles.patches.size(); begin += batch) {
    std::vector<const RgbImage*> group;
    for (std::size_t i = begin; i < std::min(tiles.patches.size(), begin + batch); ++i) {
      group.push_back(&tiles.patches[i]);
    }
    const auto out = net.infer(params, to_input_tensor<float>(group));
    for (int n = 0; n < out.gland.n(); ++n) {
      auto pair = to_probability_pair<float>(out, n);
      gland.push_back(std::move(pair.gland));
      contour.push_back(std::move(pair.contour));
    }
  }
  return {merge(tiles.grid, gland), merge(tiles.grid, contour)};
}

int cmd_synth(const RunConfig& cfg, const CommandOptions& opts) {
  return guarded("synth", [&] {
    const Logger log(opts.verbose);
    const fs::path out = output_dir(cfg, opts);
    const OutputLock lock(out);
    const auto split = generate_synthetic(cfg.synth_n, cfg.synth_height, cfg.synth_width, cfg.synth_seed,
                                          cfg.synth_test_fraction);
    save_dataset(split, out);
    log.info("wrote %zu train + %zu test synthetic samples to %s", split.train.size(), split.test.size(),
             out.c_str());
  });
}

int cmd_train(const RunConfig& cfg, const CommandOptions& opts) {
  return guarded("train", [&] {
    const Logger log(opts.verbose);
    require_dir(cfg.dataset_root, "dataset_root");
    const fs::path out = output_dir(cfg, opts);
    const OutputLock lock(out);
    const auto split = load_dataset(cfg.dataset_root, manifest_of(cfg));
    if (split.train.empty()) throw InputError("dataset has no training samples: " + cfg.dataset_root.string());
    log.info("loaded %zu train / %zu test samples", split.train.size(), split.test.size());
    const auto augmented = build_augmented_set(split, cfg.augment, cfg.band_width);
    const auto patches = make_training_patches(augmented, cfg.effective_patch_size(), cfg.pad_mode);
    log.info("%zu augmented samples -> %zu patches of %d px", augmented.size(), patches.size(),
             cfg.effective_patch_size());
    {
      std::ofstream resolved(out / "run_config.txt");
      resolved << cfg.to_text();
    }
    TrainOptions topts;
    topts.output_dir = out;
    topts.on_epoch = [&](const EpochSummary& e) {
      log.info("epoch %d  mean loss %.5f  pixel dice %.4f", e.epoch, e.mean_loss, e.mean_pixel_dice);
    };
    train(patches, cfg.network, cfg.train, topts);
  });
}

int cmd_predict(const RunConfig& cfg, const std::vector<fs::path>& images, const CommandOptions& opts) {
  return guarded("predict", [&] {
    const Logger log(opts.verbose);
    if (cfg.checkpoint.empty()) throw InputError("checkpoint is not set");
    if (!fs::is_regular_file(cfg.checkpoint)) throw InputError("checkpoint not found: " + cfg.checkpoint.string());
    std::vector<std::pair<std::string, fs::path>> inputs;
    std::vector<std::pair<std::string, RgbImage>> loaded;
    if (images.empty()) {
      require_dir(cfg.dataset_root, "dataset_root");
      for (auto& s : load_dataset(cfg.dataset_root, manifest_of(cfg)).test) {
        loaded.emplace_back(s.id, std::move(s.image));
      }
    } else {
      for (const auto& p : images) {
        if (!fs::is_regular_file(p)) throw InputError("image not found: " + p.string());
      }
      for (const auto& p : images) loaded.emplace_back(p.stem().string(), read_rgb(p));
    }
    const fs::path out = output_dir(cfg, opts);
    const OutputLock lock(out);
    const auto params = load_checkpoint<float>(cfg.checkpoint);
    const UNet<float> net(params.config);
    if (params.config.input_size != cfg.effective_patch_size()) {
      throw InputError("checkpoint input_size differs from the configured patch_size");
    }
    for (const auto& [id, image] : loaded) {
      const auto probs = predict_probabilities(net, params, image, cfg.train.batch_size, cfg.pad_mode);
      const auto result = fuse(probs, cfg.fusion);
      const auto gland = quantize(probs.gland);
      const auto contour = quantize(probs.contour);
      const auto overlay = overlay_boundaries(image, result.labels);
      write_gray8(gland, out / (id + "_gland.png"));
      write_gray8(contour, out / (id + "_contour.png"));
      write_labels16(result.labels, out / (id + "_labels.png"));
      write_rgb(overlay, out / (id + "_overlay.png"));
      const auto gland_rgb = gray_to_rgb(gland), contour_rgb = gray_to_rgb(contour);
      write_rgb(hconcat({&image, &gland_rgb, &contour_rgb, &overlay}), out / (id + "_panel.png"));
      log.info("%s: %dx%d, %d glands", id.c_str(), image.height(), image.width(), result.object_count);
    }
  });
}

int cmd_evaluate(const RunConfig& cfg, const CommandOptions& opts) {
  return guarded("evaluate", [&] {
    const Logger log(opts.verbose);
    require_dir(cfg.dataset_root, "dataset_root");
    const fs::path out = output_dir(cfg, opts);
    const fs::path preds = cfg.predictions_dir.empty() ? out : cfg.predictions_dir;
    require_dir(preds, "predictions_dir");
    const auto split = load_dataset(cfg.dataset_root, manifest_of(cfg));
    if (split.test.empty()) throw InputError("dataset has no test samples: " + cfg.dataset_root.string());

    std::set<std::string> gt_ids;
    for (const auto& s : split.test) gt_ids.insert(s.id);
    std::set<std::string> pred_ids;
    const std::string suffix = "_labels.png";
    for (const auto& entry : fs::directory_iterator(preds)) {
      const auto name = entry.path().filename().string();
      if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        pred_ids.insert(name.substr(0, name.size() - suffix.size()));
      }
    }
    std::vector<std::string> unmatched;
    for (const auto& id : gt_ids) {
      if (!pred_ids.contains(id)) unmatched.push_back("missing prediction for " + id);
    }
    for (const auto& id : pred_ids) {
      if (!gt_ids.contains(id)) unmatched.push_back("prediction " + id + " has no ground truth");
    }
    if (!unmatched.empty()) {
      std::string msg = "unmatched prediction/ground-truth ids:";
      for (const auto& u : unmatched) msg += "\n  " + u;
      throw InputError(msg);
    }

    std::vector<ImageMetrics> per_image;
    for (const auto& s : split.test) {
      const LabelMap pred = renumber_labels(read_labels(preds / (s.id + suffix)));
      if (!pred.same_extent(s.instance_mask)) throw InputError("prediction size differs for " + s.id);
      per_image.push_back(evaluate_image(s.id, pred, s.instance_mask, cfg.iou_match));
    }
    const auto report = aggregate(std::move(per_image));
    const OutputLock lock(out);
    {
      std::ofstream j(out / "metrics.json");
      j << to_json(report).dump(2) << "\n";
    }
    const auto table = to_table(report);
    {
      std::ofstream t(out / "metrics.txt");
      t << table;
    }
    std::cout << table;
    log.info("wrote %s", (out / "metrics.json").c_str());
  });
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Gland and contour segmentation of H&E histology images"};
  app.require_subcommand(1);
  fs::path config;
  std::string out;
  bool verbose = false;
  std::vector<std::string> images;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "run configuration (key = value)")->required();
    sub->add_option("--out", out, "output directory (overrides output_dir)");
    sub->add_flag("-v,--verbose", verbose, "progress messages on stderr");
  };
  auto* train_cmd = app.add_subcommand("train", "augment, tile and train; writes checkpoints and loss_log.csv");
  auto* predict_cmd = app.add_subcommand("predict", "segment images with a trained checkpoint");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score predictions against the test split");
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  for (auto* sub : {train_cmd, predict_cmd, evaluate_cmd, synth_cmd}) add_common(sub);
  predict_cmd->add_option("images", images, "images to segment (default: the test split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  RunConfig cfg;
  try {
    cfg = RunConfig::load(config);
  } catch (const InputError& e) {
    std::cerr << "glandseg: " << e.what() << "\n";
    return kExitUsage;
  }
  CommandOptions opts;
  if (!out.empty()) opts.out = fs::path(out);
  opts.verbose = verbose;

  if (train_cmd->parsed()) return cmd_train(cfg, opts);
  if (predict_cmd->parsed()) return cmd_predict(cfg, {images.begin(), images.end()}, opts);
  if (evaluate_cmd->parsed()) return cmd_evaluate(cfg, opts);
  return cmd_synth(cfg, opts);
}

}  // namespace glandseg
