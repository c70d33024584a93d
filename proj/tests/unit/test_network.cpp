#include <random>

#include <gtest/gtest.h>

#include "glandseg/network.hpp"
#include "test_util.hpp"

using namespace glandseg;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.depth = 2;
  cfg.base_filters = 4;
  cfg.input_size = 32;
  return cfg;
}

Tensor<float> random_input(int n, int size, std::uint64_t seed) {
  Tensor<float> x(n, 3, size, size);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : x.values()) v = u(rng);
  return x;
}

}  // namespace

TEST(UNet, DefaultConfigShapesAndRange) {
  const NetworkConfig cfg;
  const UNet<float> net(cfg);
  const auto params = net.init_params(1);
  const auto out = net.infer(params, random_input(1, 256, 2));
  for (const auto* t : {&out.gland, &out.contour}) {
    EXPECT_EQ(t->n(), 1);
    EXPECT_EQ(t->c(), 2);
    EXPECT_EQ(t->h(), 256);
    EXPECT_EQ(t->w(), 256);
    for (const float p : t->values()) {
      ASSERT_GT(p, 0.0f);
      ASSERT_LT(p, 1.0f);
    }
  }
  EXPECT_EQ(out.stage_sizes, (std::vector<int>{256, 128, 64, 32, 16}));
}

TEST(UNet, ZeroHeadGivesOneHalf) {
  const UNet<float> net(small_config());
  auto params = net.init_params(3);
  for (const char* head : {"gland", "contour"}) {
    for (const char* p : {".head.weight", ".head.bias"}) {
      auto& v = params.weights[params.weights.index_of(std::string(head) + p)].values;
      std::fill(v.begin(), v.end(), 0.0f);
    }
  }
  const auto out = net.infer(params, random_input(2, 32, 4));
  for (const float p : out.gland.values()) ASSERT_EQ(p, 0.5f);
  for (const float p : out.contour.values()) ASSERT_EQ(p, 0.5f);
}

TEST(UNet, HeadsAreIndependent) {
  const UNet<float> net(small_config());
  const auto params = net.init_params(5);
  const auto x = random_input(1, 32, 6);
  const auto base = net.infer(params, x);
  auto changed = params;
  for (const auto& name : net.head_parameter_names("contour")) {
    for (auto& v : changed.weights[changed.weights.index_of(name)].values) v *= -1.5f;
  }
  const auto out = net.infer(changed, x);
  EXPECT_EQ(out.gland, base.gland);
  EXPECT_NE(out.contour, base.contour);
  for (const auto& name : net.head_parameter_names("gland")) {
    EXPECT_TRUE(name.starts_with("gland."));
  }
}

TEST(UNet, InferIsPure) {
  const UNet<float> net(small_config());
  const auto params = net.init_params(7);
  const auto copy = params;
  const auto x = random_input(3, 32, 8);
  const auto a = net.infer(params, x);
  const auto b = net.infer(params, x);
  EXPECT_EQ(a.gland, b.gland);
  EXPECT_EQ(a.contour, b.contour);
  EXPECT_EQ(params, copy);
}

TEST(UNet, TrainForwardUpdatesOnlyStatistics) {
  const UNet<float> net(small_config());
  auto params = net.init_params(9);
  const auto before = params;
  typename UNet<float>::Cache cache;
  net.forward(params, random_input(2, 32, 10), Mode::kTrain, &cache);
  EXPECT_EQ(params.weights, before.weights);
  EXPECT_NE(params.bn_stats, before.bn_stats);
  EXPECT_THROW(net.forward(params, random_input(2, 32, 10), Mode::kTrain, nullptr), Error);
}

TEST(UNet, RejectsWrongInputShape) {
  const UNet<float> net(small_config());
  const auto params = net.init_params(1);
  EXPECT_THROW(net.infer(params, random_input(1, 64, 1)), ShapeError);
  EXPECT_THROW(net.infer(params, Tensor<float>(1, 1, 32, 32)), ShapeError);
}

TEST(UNet, ZeroOutputGradientGivesZeroGradients) {
  const UNet<double> net(small_config());
  auto params = net.init_params(11);
  typename UNet<double>::Cache cache;
  Tensor<double> x(2, 3, 32, 32, 0.3);
  const auto out = net.forward(params, x, Mode::kTrain, &cache);
  const Tensor<double> zero(out.gland.n(), 2, 32, 32);
  const auto grads = net.backward(params, cache, zero, zero);
  ASSERT_TRUE(grads.same_layout(params.weights));
  for (const auto& g : grads) {
    for (const double v : g.values) ASSERT_EQ(v, 0.0) << g.name;
  }
}

TEST(UNet, GradientShapesMatchParameters) {
  const UNet<float> net(small_config());
  auto params = net.init_params(12);
  typename UNet<float>::Cache cache;
  const auto out = net.forward(params, random_input(1, 32, 13), Mode::kTrain, &cache);
  Tensor<float> ones(1, 2, 32, 32, 1.0f);
  const auto grads = net.backward(params, cache, ones, ones);
  ASSERT_EQ(grads.size(), params.weights.size());
  for (int i = 0; i < grads.size(); ++i) {
    EXPECT_EQ(grads[i].name, params.weights[i].name);
    EXPECT_EQ(grads[i].shape, params.weights[i].shape);
  }
}

TEST(UNet, InitIsSeededAndTruncated) {
  const UNet<float> net(small_config());
  const auto a = net.init_params(21), b = net.init_params(21), c = net.init_params(22);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.weights, c.weights);
  for (const auto& p : a.weights) {
    if (!p.name.ends_with("conv.weight") && !p.name.ends_with("head.weight")) continue;
    int fan_in = 1;
    for (std::size_t d = 1; d < p.shape.size(); ++d) fan_in *= p.shape[d];
    const double bound = 2.0 * std::sqrt(2.0 / fan_in) + 1e-6;
    for (const float v : p.values) ASSERT_LE(std::abs(v), bound) << p.name;
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  testutil::TempDir dir;
  const UNet<float> net(small_config());
  auto params = net.init_params(31);
  typename UNet<float>::Cache cache;
  net.forward(params, random_input(2, 32, 1), Mode::kTrain, &cache);
  save_checkpoint(params, dir / "c.gsck");
  const auto back = load_checkpoint<float>(dir / "c.gsck");
  EXPECT_EQ(back.config, params.config);
  EXPECT_EQ(back, params);
  EXPECT_THROW(load_checkpoint<double>(dir / "c.gsck"), Error);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.gsck"), InputError);
}

TEST(NetworkConfig, Validation) {
  NetworkConfig cfg;
  cfg.input_size = 250;  // not divisible by 2^4
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.depth = 0;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.base_filters = 0;
  EXPECT_THROW(cfg.validate(), InputError);
}
