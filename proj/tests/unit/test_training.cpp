#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "glandseg/augmentation.hpp"
#include "glandseg/training.hpp"
#include "test_util.hpp"

using namespace glandseg;

namespace {

std::vector<double> filled(std::size_t n, double v) { return std::vector<double>(n, v); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<TrainingPatch> tiny_patches(int count, int size, std::uint64_t seed, int patch = 0) {
  DatasetSplit split;
  for (int i = 0; i < count; ++i) {
    split.train.push_back(generate_synthetic_sample("train_" + std::to_string(i + 1), size, size, seed + i));
  }
  AugmentConfig aug;
  aug.factor = 1;
  return make_training_patches(build_augmented_set(split, aug, 2), patch ? patch : size, PadMode::kReflect);
}

}  // namespace

TEST(Bce, AnalyticValues) {
  const auto half = filled(16, 0.5), t = filled(16, 1.0), z = filled(16, 0.0);
  EXPECT_NEAR(bce<double>(half, t), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce<double>(half, z), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce<double>(filled(4, 0.9), filled(4, 1.0)), -std::log(0.9), 1e-12);
  EXPECT_NEAR(-std::log(0.9), 0.10536, 1e-5);
  EXPECT_LT(bce<double>(t, t), 1e-6);
  EXPECT_LT(bce<double>(z, z), 1e-6);
  EXPECT_THROW(bce<double>(filled(3, 0.5), filled(4, 1.0)), ShapeError);
}

TEST(SoftDice, HandValues) {
  EXPECT_DOUBLE_EQ(soft_dice<double>(filled(4, 1.0), filled(4, 1.0), 1.0), 1.0);
  EXPECT_DOUBLE_EQ(soft_dice<double>(filled(4, 0.0), filled(4, 0.0), 1.0), 1.0);
  EXPECT_DOUBLE_EQ(soft_dice<double>(filled(4, 1.0), filled(4, 0.0), 1.0), 0.2);
}

TEST(HeadLoss, HandValueAndBounds) {
  const double expected = std::log(2.0) + (1.0 - 5.0 / 7.0);
  EXPECT_NEAR(head_loss<double>(filled(4, 0.5), filled(4, 1.0), 1.0), expected, 1e-12);
  EXPECT_NEAR(expected, 0.9788, 1e-4);
  EXPECT_LT(head_loss<double>(filled(4, 1.0), filled(4, 1.0), 1.0), 1e-6);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(9), t(9);
    for (auto& v : p) v = u(rng);
    for (auto& v : t) v = u(rng) < 0.5;
    ASSERT_GE(head_loss<double>(p, t, 1.0), 0.0);
  }
}

TEST(HeadLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.02, 0.98);
  std::vector<double> p(64), t(64), g(64);
  for (auto& v : p) v = u(rng);
  for (auto& v : t) v = u(rng) < 0.4;
  const double scale = 0.8;
  head_loss_grad<double>(p, t, 1.0, scale, g);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double h = 1e-6;
    auto q = p;
    q[i] += h;
    const double lp = head_loss<double>(q, t, 1.0);
    q[i] -= 2 * h;
    const double lm = head_loss<double>(q, t, 1.0);
    const double numeric = scale * (lp - lm) / (2 * h);
    EXPECT_NEAR(g[i], numeric, 1e-7 * std::max(1.0, std::abs(numeric))) << i;
  }
}

TEST(TwoChannelLoss, AveragesForegroundAndBackground) {
  Tensor<double> probs(1, 2, 2, 2), target(1, 1, 2, 2);
  for (int i = 0; i < 4; ++i) {
    probs.plane(0, 1)[i] = 0.5;
    probs.plane(0, 0)[i] = 0.5;
    target.plane(0, 0)[i] = 1.0;
  }
  const double fg = head_loss<double>(filled(4, 0.5), filled(4, 1.0), 1.0);
  const double bg = head_loss<double>(filled(4, 0.5), filled(4, 0.0), 1.0);
  EXPECT_NEAR(two_channel_head_loss<double>(probs, target, 1.0, 1.0, nullptr), 0.5 * (fg + bg), 1e-12);
}

TEST(Rmsprop, HandComputedStep) {
  ParamSet<double> w, g;
  w.add("p", {1}, 0.0);
  g.add("p", {1}, 1.0);
  auto state = make_optimizer_state(w);
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.rho = 0.9;
  cfg.eps = 0.0;
  rmsprop_step(w, g, state, cfg);
  EXPECT_NEAR(state.mean_square.data(0)[0], 0.1, 1e-12);
  EXPECT_NEAR(w.data(0)[0], -0.1 / std::sqrt(0.1), 1e-9);
  EXPECT_NEAR(w.data(0)[0], -0.31623, 1e-5);
}

TEST(Rmsprop, ZeroGradientDecaysState) {
  ParamSet<double> w, g;
  w.add("p", {3}, 2.0);
  g.add("p", {3}, 0.0);
  auto state = make_optimizer_state(w);
  std::fill(state.mean_square[0].values.begin(), state.mean_square[0].values.end(), 0.5);
  TrainConfig cfg;
  rmsprop_step(w, g, state, cfg);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(w.data(0)[i], 2.0);
    EXPECT_NEAR(state.mean_square.data(0)[i], 0.45, 1e-15);
  }
}

TEST(Rmsprop, ConstantGradientConvergesAndIsPure) {
  ParamSet<double> w, g;
  w.add("p", {2}, 0.0);
  g.add("p", {2}, 1.5);
  g.data(0)[1] = -0.25;
  TrainConfig cfg;
  cfg.rho = 0.9;
  auto s1 = make_optimizer_state(w), s2 = make_optimizer_state(w);
  auto w1 = w, w2 = w;
  for (int i = 0; i < 200; ++i) {
    rmsprop_step(w1, g, s1, cfg);
    rmsprop_step(w2, g, s2, cfg);
  }
  EXPECT_NEAR(s1.mean_square.data(0)[0], 1.5 * 1.5, 1e-6);
  EXPECT_NEAR(s1.mean_square.data(0)[1], 0.0625, 1e-6);
  EXPECT_EQ(w1, w2);
  EXPECT_EQ(s1.mean_square, s2.mean_square);
  EXPECT_EQ(s1.step, 200);
}

TEST(Rmsprop, NonFiniteGradientNamesParameter) {
  ParamSet<float> w, g;
  w.add("enc0.unit1.conv.weight", {2});
  g.add("enc0.unit1.conv.weight", {2});
  g.data(0)[1] = std::nanf("");
  auto state = make_optimizer_state(w);
  try {
    rmsprop_step(w, g, state, TrainConfig{});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("enc0.unit1.conv.weight"), std::string::npos);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.lr = -1;
  EXPECT_THROW(cfg.validate(), InputError);
}

TEST(Patches, TileImageAndMasksTogether) {
  const auto patches = tiny_patches(2, 80, 1, 64);
  // 80 px in 64 px patches: 2 x 2 grid per sample.
  ASSERT_EQ(patches.size(), 8u);
  for (const auto& p : patches) {
    EXPECT_EQ(p.image.height(), 64);
    EXPECT_EQ(p.gland.width(), 64);
    EXPECT_EQ(p.contour.height(), 64);
  }
}

TEST(Train, LogsAndCheckpointsAreDeterministic) {
  testutil::TempDir a, b;
  const auto patches = tiny_patches(3, 32, 5);  // 3 patches
  NetworkConfig net;
  net.depth = 1;
  net.base_filters = 4;
  net.input_size = 32;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 9;
  int steps_seen = 0;
  TrainOptions opts;
  opts.output_dir = a.path();
  opts.on_step = [&](const StepRecord&) { ++steps_seen; };
  const auto ra = train(patches, net, cfg, opts);
  opts.output_dir = b.path();
  const auto rb = train(patches, net, cfg, opts);
  EXPECT_EQ(ra.log.steps.size(), 4u);  // 2 epochs x ceil(3 / 2)
  EXPECT_EQ(steps_seen, 8);
  EXPECT_EQ(ra.params, rb.params);
  const auto csv = slurp(a / "loss_log.csv");
  EXPECT_EQ(csv, slurp(b / "loss_log.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), loss_csv_header());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_TRUE(std::filesystem::exists(a / "checkpoint.gsck"));
  EXPECT_TRUE(std::filesystem::exists(a / "checkpoint_epoch1.gsck"));
  EXPECT_TRUE(std::filesystem::exists(a / "checkpoint_epoch2.gsck"));
  EXPECT_EQ(load_checkpoint<float>(a / "checkpoint.gsck"), ra.params);
  cfg.seed = 10;
  const auto rc = train(patches, net, cfg);
  EXPECT_NE(rc.params, ra.params);
}

TEST(Train, LossDecreasesOnSmallProblem) {
  const auto patches = tiny_patches(2, 32, 11);
  NetworkConfig net;
  net.depth = 2;
  net.base_filters = 8;
  net.input_size = 32;
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 2;
  const auto r = train(patches, net, cfg);
  ASSERT_EQ(r.log.steps.size(), 40u);
  EXPECT_LT(r.log.steps.back().loss_total, 0.7 * r.log.steps.front().loss_total);
}

TEST(Train, RejectsWrongPatchSize) {
  const auto patches = tiny_patches(1, 32, 1);
  NetworkConfig net;
  net.depth = 1;
  net.base_filters = 2;
  net.input_size = 64;
  EXPECT_THROW(train(patches, net, TrainConfig{}), Error);
  EXPECT_THROW(train({}, net, TrainConfig{}), InputError);
}
