#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "glandseg/image.hpp"
#include "glandseg/layers.hpp"
#include "glandseg/params.hpp"
#include "glandseg/tensor.hpp"

namespace glandseg {

struct NetworkConfig {
  int depth = 4;          // number of down-sampling stages
  int base_filters = 32;  // filters of the first stage, doubled per stage
  int kernel = 3;
  int input_size = 256;
  int channels_in = 3;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;

  void validate() const;
  int filters(int stage) const { return base_filters << stage; }
  bool operator==(const NetworkConfig&) const = default;
};

template <typename T>
struct NetworkParams {
  NetworkConfig config;
  ParamSet<T> weights;   // learnable
  ParamSet<T> bn_stats;  // running mean / variance, not trained by gradient
  bool operator==(const NetworkParams&) const = default;
};

/// Foreground probability maps of one patch.
struct ProbabilityPair {
  ProbabilityMap gland;
  ProbabilityMap contour;
};

/// Dual-decoder U-Net: one contracting path feeding two independent expanding
/// paths (gland, contour). Each head ends in a 1x1 convolution to two channels
/// (background, foreground) followed by an element-wise sigmoid.
template <typename T>
class UNet {
 public:
  static constexpr int kForeground = 1;

  struct Output {
    Tensor<T> gland;    // N x 2 x H x W, sigmoid probabilities
    Tensor<T> contour;  // N x 2 x H x W
    std::vector<int> stage_sizes;  // encoder resolutions followed by the bottleneck
  };

  struct DecoderCache {
    std::vector<typename UpConvBlock<T>::Cache> stages;  // indexed by encoder stage
  };

  struct Cache {
    Tensor<T> input;
    std::vector<typename ConvBlock<T>::Cache> encoder;
    std::vector<Tensor<T>> pooled;  // input of encoder stage d+1 / bottleneck
    std::vector<PoolIndices> pool_indices;
    typename ConvBlock<T>::Cache bottleneck;
    DecoderCache gland;
    DecoderCache contour;
    Tensor<T> gland_prob;
    Tensor<T> contour_prob;
  };

  explicit UNet(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }

  /// Parameter layout with BN scale 1, offset 0, running mean 0, variance 1
  /// and all convolution weights zero.
  NetworkParams<T> blank_params() const;
  /// Truncated-normal (2 sigma) weights with stddev sqrt(2 / fan_in), zero biases.
  NetworkParams<T> init_params(std::uint64_t seed) const;

  /// Train mode uses batch statistics, updates params.bn_stats and fills `cache`.
  Output forward(NetworkParams<T>& params, const Tensor<T>& input, Mode mode, Cache* cache = nullptr) const;
  /// Infer-mode forward; a pure function of (params, input).
  Output infer(const NetworkParams<T>& params, const Tensor<T>& input) const;

  /// Gradients of a scalar loss given its derivatives with respect to both
  /// sigmoid outputs. Running statistics receive no gradient.
  ParamSet<T> backward(const NetworkParams<T>& params, const Cache& cache, const Tensor<T>& d_gland,
                       const Tensor<T>& d_contour) const;

  /// Names of parameters belonging to one head ("gland" or "contour").
  std::vector<std::string> head_parameter_names(const std::string& head) const;

 private:
  struct Decoder {
    std::vector<UpConvBlock<T>> stages;  // indexed by encoder stage
    Conv2d<T> head;
  };

  Output run(const ForwardContext<T>& ctx, const Tensor<T>& input, Cache* cache) const;
  Tensor<T> run_decoder(const ForwardContext<T>& ctx, const Decoder& dec, const Tensor<T>& bottom,
                        const std::vector<const Tensor<T>*>& skips, DecoderCache* cache) const;
  void check_input(const Tensor<T>& input) const;

  NetworkConfig config_;
  ParamSet<T> weight_layout_;
  ParamSet<T> stats_layout_;
  std::vector<ConvBlock<T>> encoder_;
  ConvBlock<T> bottleneck_;
  Decoder gland_;
  Decoder contour_;
};

/// Packs H x W x 3 8-bit patches into an N x 3 x H x W tensor scaled to [0, 1].
template <typename T>
Tensor<T> to_input_tensor(const std::vector<const RgbImage*>& patches);

/// Foreground channel of sample n of both heads.
template <typename T>
ProbabilityPair to_probability_pair(const typename UNet<T>::Output& out, int n);

/// Binary checkpoint: magic, config, named weight tensors, named BN statistics.
/// Written to a temporary file and renamed into place.
template <typename T>
void save_checkpoint(const NetworkParams<T>& params, const std::filesystem::path& path);
template <typename T>
NetworkParams<T> load_checkpoint(const std::filesystem::path& path);

std::string config_to_text(const NetworkConfig& cfg);

}  // namespace glandseg
