#pragma once

// Building blocks of the segmentation network with hand-written backward passes.
// Activations are N x C x H x W; parameters live in ParamSets and are referenced
// by index so the same layer description serves any parameter instance.

#include <cstdint>
#include <string>
#include <vector>

#include "glandseg/params.hpp"
#include "glandseg/tensor.hpp"

namespace glandseg {

enum class Mode { kTrain, kInfer };

template <typename T>
struct ForwardContext {
  const ParamSet<T>& weights;
  const ParamSet<T>& stats;
  ParamSet<T>* stats_update = nullptr;  // written in train mode only
  Mode mode = Mode::kInfer;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;
};

template <typename T>
struct BackwardContext {
  const ParamSet<T>& weights;
  ParamSet<T>& grads;
};

/// Same-padded stride-1 convolution. Even kernels pad (k-1)/2 before and the
/// remainder after, as TensorFlow does.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamSet<T>& weights, const std::string& name, int in_channels, int out_channels, int kernel,
         bool bias);

  void forward(const ParamSet<T>& weights, const Tensor<T>& x, Tensor<T>& y) const;
  /// Accumulates weight gradients; writes dx when non-null.
  void backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx) const;

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int kernel() const { return k_; }
  int weight_index() const { return weight_; }
  int bias_index() const { return bias_; }

 private:
  int weight_ = -1;
  int bias_ = -1;
  int cin_ = 0, cout_ = 0, k_ = 1;
};

template <typename T>
class BatchNorm {
 public:
  struct Cache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
  };

  BatchNorm() = default;
  BatchNorm(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int channels);

  /// In-place on x. `cache` is required in train mode.
  void forward(const ForwardContext<T>& ctx, Tensor<T>& x, Cache* cache) const;
  /// In-place: dy becomes dx.
  void backward(const BackwardContext<T>& ctx, const Cache& cache, Tensor<T>& dy) const;

  int gamma_index() const { return gamma_; }
  int beta_index() const { return beta_; }
  int mean_index() const { return mean_; }
  int var_index() const { return var_; }

 private:
  int gamma_ = -1, beta_ = -1, mean_ = -1, var_ = -1;
  int channels_ = 0;
};

/// convolution -> batch normalisation -> ReLU
template <typename T>
class ConvUnit {
 public:
  struct Cache {
    typename BatchNorm<T>::Cache bn;
    Tensor<T> out;
  };

  ConvUnit() = default;
  ConvUnit(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int in_channels,
           int out_channels, int kernel);

  Tensor<T> forward(const ForwardContext<T>& ctx, const Tensor<T>& x, Cache* cache) const;
  void backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy,
                Tensor<T>* dx) const;

  const Conv2d<T>& conv() const { return conv_; }
  const BatchNorm<T>& bn() const { return bn_; }

 private:
  Conv2d<T> conv_;
  BatchNorm<T> bn_;
};

/// Two successive SxS ConvUnits with n filters each; spatial size preserved.
template <typename T>
class ConvBlock {
 public:
  struct Cache {
    typename ConvUnit<T>::Cache first;
    typename ConvUnit<T>::Cache second;
  };

  ConvBlock() = default;
  ConvBlock(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int in_channels, int filters,
            int kernel);

  /// Throws NumericalError on non-finite output.
  Tensor<T> forward(const ForwardContext<T>& ctx, const Tensor<T>& x, Cache* cache) const;
  void backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy,
                Tensor<T>* dx) const;

  int filters() const { return second_.conv().out_channels(); }

 private:
  std::string name_;
  ConvUnit<T> first_;
  ConvUnit<T> second_;
};

/// Nearest-neighbour x2 upsampling, 2x2 ConvUnit with n filters, channel
/// concatenation with the skip tensor, then a ConvBlock with n filters.
template <typename T>
class UpConvBlock {
 public:
  struct Cache {
    typename ConvUnit<T>::Cache up;
    Tensor<T> concat;
    typename ConvBlock<T>::Cache block;
  };

  UpConvBlock() = default;
  UpConvBlock(ParamSet<T>& weights, ParamSet<T>& stats, const std::string& name, int in_channels,
              int skip_channels, int filters, int kernel);

  Tensor<T> forward(const ForwardContext<T>& ctx, const Tensor<T>& x, const Tensor<T>& skip,
                    Cache* cache) const;
  /// Writes dx and accumulates into dskip.
  void backward(const BackwardContext<T>& ctx, const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy,
                Tensor<T>& dx, Tensor<T>& dskip) const;

 private:
  int skip_channels_ = 0;
  ConvUnit<T> up_;
  ConvBlock<T> block_;
};

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);
/// Adjoint of upsample2x: sums each 2x2 block.
template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dy);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

struct PoolIndices {
  std::vector<std::uint8_t> argmax;  // 0..3 within each 2x2 window
};
template <typename T>
Tensor<T> max_pool2x(const Tensor<T>& x, PoolIndices* indices);
template <typename T>
Tensor<T> max_pool2x_backward(const Tensor<T>& dy, const PoolIndices& indices);

template <typename T>
void sigmoid_inplace(Tensor<T>& x);

template <typename T>
bool all_finite(const Tensor<T>& x);

}  // namespace glandseg
