#include "glandseg/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace glandseg {

void NetworkConfig::validate() const {
  if (depth < 1) throw InputError("depth must be >= 1");
  if (base_filters < 1) throw InputError("base_filters must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw InputError("kernel must be a positive odd number");
  if (channels_in < 1) throw InputError("channels_in must be >= 1");
  if (input_size < (1 << depth) || input_size % (1 << depth) != 0) {
    throw InputError("input_size " + std::to_string(input_size) + " must be divisible by 2^depth = " +
                     std::to_string(1 << depth));
  }
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw InputError("bn_momentum must be in [0, 1)");
  if (!(bn_epsilon > 0.0)) throw InputError("bn_epsilon must be positive");
}

template <typename T>
UNet<T>::UNet(NetworkConfig config) : config_(config) {
  config_.validate();
  const int k = config_.kernel;
  int channels = config_.channels_in;
  for (int d = 0; d < config_.depth; ++d) {
    encoder_.emplace_back(weight_layout_, stats_layout_, "enc" + std::to_string(d), channels,
                          config_.filters(d), k);
    channels = config_.filters(d);
  }
  bottleneck_ = ConvBlock<T>(weight_layout_, stats_layout_, "bottleneck", channels,
                             config_.filters(config_.depth), k);
  for (auto [dec, name] : {std::pair<Decoder*, const char*>{&gland_, "gland"},
                            std::pair<Decoder*, const char*>{&contour_, "contour"}}) {
    dec->stages.resize(static_cast<std::size_t>(config_.depth));
    for (int d = config_.depth - 1; d >= 0; --d) {
      dec->stages[static_cast<std::size_t>(d)] =
          UpConvBlock<T>(weight_layout_, stats_layout_, std::string(name) + ".up" + std::to_string(d),
                         config_.filters(d + 1), config_.filters(d), config_.filters(d), k);
    }
    dec->head = Conv2d<T>(weight_layout_, std::string(name) + ".head", config_.filters(0), 2, 1, true);
  }
}

template <typename T>
NetworkParams<T> UNet<T>::blank_params() const {
  return {config_, weight_layout_, stats_layout_};
}

template <typename T>
NetworkParams<T> UNet<T>::init_params(std::uint64_t seed) const {
  NetworkParams<T> p = blank_params();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& e : p.weights) {
    if (e.shape.size() != 4) continue;  // BN scale/offset and biases keep their defaults
    const double fan_in = static_cast<double>(e.shape[1]) * e.shape[2] * e.shape[3];
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : e.values) {
      double z = normal(rng);
      while (std::abs(z) > 2.0) z = normal(rng);
      v = static_cast<T>(z * stddev);
    }
  }
  return p;
}

template <typename T>
void UNet<T>::check_input(const Tensor<T>& input) const {
  if (input.n() < 1 || input.c() != config_.channels_in || input.h() != config_.input_size ||
      input.w() != config_.input_size) {
    throw ShapeError("network expects N x " + std::to_string(config_.channels_in) + " x " +
                     std::to_string(config_.input_size) + " x " + std::to_string(config_.input_size) +
                     " input, got " + input.shape_string());
  }
}

template <typename T>
Tensor<T> UNet<T>::run_decoder(const ForwardContext<T>& ctx, const Decoder& dec, const Tensor<T>& bottom,
                               const std::vector<const Tensor<T>*>& skips, DecoderCache* cache) const {
  if (cache) cache->stages.assign(static_cast<std::size_t>(config_.depth), {});
  Tensor<T> x = bottom;
  for (int d = config_.depth - 1; d >= 0; --d) {
    const auto i = static_cast<std::size_t>(d);
    x = dec.stages[i].forward(ctx, x, *skips[i], cache ? &cache->stages[i] : nullptr);
  }
  Tensor<T> logits;
  dec.head.forward(ctx.weights, x, logits);
  sigmoid_inplace(logits);
  return logits;
}

template <typename T>
typename UNet<T>::Output UNet<T>::run(const ForwardContext<T>& ctx, const Tensor<T>& input, Cache* cache) const {
  check_input(input);
  Output out;
  const auto depth = static_cast<std::size_t>(config_.depth);
  if (cache) {
    cache->input = input;
    cache->encoder.assign(depth, {});
    cache->pooled.assign(depth, {});
    cache->pool_indices.assign(depth, {});
  }
  std::vector<Tensor<T>> skip_store;
  std::vector<const Tensor<T>*> skips(depth);
  if (!cache) skip_store.resize(depth);
  Tensor<T> x = input;
  for (std::size_t d = 0; d < depth; ++d) {
    out.stage_sizes.push_back(x.h());
    Tensor<T> s = encoder_[d].forward(ctx, x, cache ? &cache->encoder[d] : nullptr);
    if (cache) {
      skips[d] = &cache->encoder[d].second.out;
      cache->pooled[d] = max_pool2x(s, &cache->pool_indices[d]);
      x = cache->pooled[d];
    } else {
      x = max_pool2x<T>(s, nullptr);
      skip_store[d] = std::move(s);
      skips[d] = &skip_store[d];
    }
  }
  out.stage_sizes.push_back(x.h());
  Tensor<T> bottom = bottleneck_.forward(ctx, x, cache ? &cache->bottleneck : nullptr);
  out.gland = run_decoder(ctx, gland_, bottom, skips, cache ? &cache->gland : nullptr);
  out.contour = run_decoder(ctx, contour_, bottom, skips, cache ? &cache->contour : nullptr);
  if (cache) {
    cache->gland_prob = out.gland;
    cache->contour_prob = out.contour;
  }
  return out;
}

template <typename T>
typename UNet<T>::Output UNet<T>::forward(NetworkParams<T>& params, const Tensor<T>& input, Mode mode,
                                          Cache* cache) const {
  if (mode == Mode::kTrain && !cache) throw Error("train-mode forward needs a cache");
  ForwardContext<T> ctx{params.weights, params.bn_stats, mode == Mode::kTrain ? &params.bn_stats : nullptr,
                        mode, config_.bn_momentum, config_.bn_epsilon};
  return run(ctx, input, mode == Mode::kTrain ? cache : nullptr);
}

template <typename T>
typename UNet<T>::Output UNet<T>::infer(const NetworkParams<T>& params, const Tensor<T>& input) const {
  ForwardContext<T> ctx{params.weights, params.bn_stats, nullptr, Mode::kInfer, config_.bn_momentum,
                        config_.bn_epsilon};
  return run(ctx, input, nullptr);
}

template <typename T>
ParamSet<T> UNet<T>::backward(const NetworkParams<T>& params, const Cache& cache, const Tensor<T>& d_gland,
                              const Tensor<T>& d_contour) const {
  if (!d_gland.same_shape(cache.gland_prob) || !d_contour.same_shape(cache.contour_prob)) {
    throw ShapeError("output gradient shape does not match the cached forward pass");
  }
  ParamSet<T> grads = params.weights.like();
  BackwardContext<T> ctx{params.weights, grads};
  const int depth = config_.depth;
  const Tensor<T>& bottom = cache.bottleneck.second.out;

  std::vector<Tensor<T>> dskips(static_cast<std::size_t>(depth));
  for (int d = 0; d < depth; ++d) {
    const auto& s = cache.encoder[static_cast<std::size_t>(d)].second.out;
    dskips[static_cast<std::size_t>(d)] = Tensor<T>(s.n(), s.c(), s.h(), s.w());
  }
  Tensor<T> dbottom(bottom.n(), bottom.c(), bottom.h(), bottom.w());

  auto decoder_backward = [&](const Decoder& dec, const DecoderCache& dc, const Tensor<T>& prob,
                              const Tensor<T>& dprob) {
    Tensor<T> dlogits = dprob;
    auto g = dlogits.values();
    const auto p = prob.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= p[i] * (T(1) - p[i]);
    Tensor<T> dx;
    dec.head.backward(ctx, dc.stages[0].block.second.out, dlogits, &dx);
    for (int d = 0; d < depth; ++d) {
      const auto i = static_cast<std::size_t>(d);
      const Tensor<T>& stage_in = d + 1 < depth ? dc.stages[i + 1].block.second.out : bottom;
      Tensor<T> dprev;
      dec.stages[i].backward(ctx, stage_in, dc.stages[i], dx, dprev, dskips[i]);
      dx = std::move(dprev);
    }
    auto db = dbottom.values();
    const auto src = dx.values();
    for (std::size_t i = 0; i < db.size(); ++i) db[i] += src[i];
  };
  decoder_backward(gland_, cache.gland, cache.gland_prob, d_gland);
  decoder_backward(contour_, cache.contour, cache.contour_prob, d_contour);

  Tensor<T> dx;
  bottleneck_.backward(ctx, cache.pooled[static_cast<std::size_t>(depth - 1)], cache.bottleneck, dbottom, &dx);
  for (int d = depth - 1; d >= 0; --d) {
    const auto i = static_cast<std::size_t>(d);
    Tensor<T> ds = max_pool2x_backward(dx, cache.pool_indices[i]);
    auto dv = ds.values();
    const auto sv = dskips[i].values();
    for (std::size_t j = 0; j < dv.size(); ++j) dv[j] += sv[j];
    const Tensor<T>& in = d > 0 ? cache.pooled[i - 1] : cache.input;
    Tensor<T> dprev;
    encoder_[i].backward(ctx, in, cache.encoder[i], ds, d > 0 ? &dprev : nullptr);
    dx = std::move(dprev);
  }
  return grads;
}

template <typename T>
std::vector<std::string> UNet<T>::head_parameter_names(const std::string& head) const {
  std::vector<std::string> out;
  const std::string prefix = head + ".";
  for (const auto& e : weight_layout_) {
    if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
  }
  return out;
}

template <typename T>
Tensor<T> to_input_tensor(const std::vector<const RgbImage*>& patches) {
  if (patches.empty()) throw ShapeError("no patches to pack");
  const int h = patches.front()->height(), w = patches.front()->width(), c = patches.front()->channels();
  Tensor<T> t(static_cast<int>(patches.size()), c, h, w);
  for (int n = 0; n < t.n(); ++n) {
    const auto& img = *patches[static_cast<std::size_t>(n)];
    if (!img.same_shape(h, w, c)) throw ShapeError("patches in a batch must share one shape");
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int ch = 0; ch < c; ++ch) t(n, ch, y, x) = static_cast<T>(img.at(y, x, ch)) / T(255);
      }
    }
  }
  return t;
}

template <typename T>
ProbabilityPair to_probability_pair(const typename UNet<T>::Output& out, int n) {
  ProbabilityPair pair;
  const int h = out.gland.h(), w = out.gland.w();
  pair.gland = ProbabilityMap(h, w);
  pair.contour = ProbabilityMap(h, w);
  const T* g = out.gland.plane(n, UNet<T>::kForeground);
  const T* c = out.contour.plane(n, UNet<T>::kForeground);
  for (std::size_t i = 0; i < pair.gland.size(); ++i) {
    pair.gland.data()[i] = static_cast<float>(g[i]);
    pair.contour.data()[i] = static_cast<float>(c[i]);
  }
  return pair;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'G', 'L', 'S', 'E', 'G', 'C', 'K', '1'};

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& in, const std::filesystem::path& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw InputError("truncated checkpoint " + path.string());
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::filesystem::path& path) {
  const auto n = get<std::uint32_t>(in, path);
  if (n > (1u << 24)) throw InputError("corrupt checkpoint " + path.string());
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw InputError("truncated checkpoint " + path.string());
  return s;
}

template <typename T>
void put_set(std::ostream& out, const ParamSet<T>& set) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(set.size()));
  for (const auto& e : set) {
    put_string(out, e.name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (const int d : e.shape) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(T)));
  }
}

template <typename T>
void get_set(std::istream& in, ParamSet<T>& layout, const std::filesystem::path& path) {
  const auto count = get<std::uint32_t>(in, path);
  if (static_cast<int>(count) != layout.size()) {
    throw InputError("checkpoint " + path.string() + " holds " + std::to_string(count) +
                     " tensors, configuration expects " + std::to_string(layout.size()));
  }
  for (auto& e : layout) {
    const auto name = get_string(in, path);
    if (name != e.name) throw InputError("checkpoint tensor '" + name + "' where '" + e.name + "' expected");
    const auto rank = get<std::uint32_t>(in, path);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = get<std::int32_t>(in, path);
    if (shape != e.shape) throw InputError("checkpoint tensor '" + name + "' has an unexpected shape");
    in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * sizeof(T)));
    if (!in) throw InputError("truncated checkpoint " + path.string());
  }
}

NetworkConfig config_from_text(const std::string& text, const std::filesystem::path& path) {
  NetworkConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq);
    const auto value = line.substr(eq + 1);
    if (key == "depth") cfg.depth = std::stoi(value);
    else if (key == "base_filters") cfg.base_filters = std::stoi(value);
    else if (key == "kernel") cfg.kernel = std::stoi(value);
    else if (key == "input_size") cfg.input_size = std::stoi(value);
    else if (key == "channels_in") cfg.channels_in = std::stoi(value);
    else if (key == "bn_momentum") cfg.bn_momentum = std::stod(value);
    else if (key == "bn_epsilon") cfg.bn_epsilon = std::stod(value);
    else throw InputError("unknown network key '" + key + "' in checkpoint " + path.string());
  }
  return cfg;
}

}  // namespace

std::string config_to_text(const NetworkConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "depth=" << cfg.depth << "\nbase_filters=" << cfg.base_filters << "\nkernel=" << cfg.kernel
      << "\ninput_size=" << cfg.input_size << "\nchannels_in=" << cfg.channels_in
      << "\nbn_momentum=" << cfg.bn_momentum << "\nbn_epsilon=" << cfg.bn_epsilon << "\n";
  return out.str();
}

template <typename T>
void save_checkpoint(const NetworkParams<T>& params, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(sizeof(T)));
    put_string(out, config_to_text(params.config));
    put_set(out, params.weights);
    put_set(out, params.bn_stats);
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
NetworkParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("checkpoint not found: " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw InputError("not a glandseg checkpoint: " + path.string());
  }
  const auto width = get<std::uint32_t>(in, path);
  if (width != sizeof(T)) throw InputError("checkpoint scalar width mismatch in " + path.string());
  const NetworkConfig cfg = config_from_text(get_string(in, path), path);
  NetworkParams<T> params = UNet<T>(cfg).blank_params();
  get_set(in, params.weights, path);
  get_set(in, params.bn_stats, path);
  return params;
}

template class UNet<float>;
template class UNet<double>;
template Tensor<float> to_input_tensor(const std::vector<const RgbImage*>&);
template Tensor<double> to_input_tensor(const std::vector<const RgbImage*>&);
template ProbabilityPair to_probability_pair<float>(const UNet<float>::Output&, int);
template ProbabilityPair to_probability_pair<double>(const UNet<double>::Output&, int);
template void save_checkpoint(const NetworkParams<float>&, const std::filesystem::path&);
template void save_checkpoint(const NetworkParams<double>&, const std::filesystem::path&);
template NetworkParams<float> load_checkpoint(const std::filesystem::path&);
template NetworkParams<double> load_checkpoint(const std::filesystem::path&);

}  // namespace glandseg
