#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "glandseg/evaluation.hpp"
#include "glandseg/training.hpp"
#include "oracles.hpp"

using namespace glandseg;

namespace {

LabelMap rect(int h, int w, int y0, int x0, int y1, int x1, int label = 1, LabelMap m = {}) {
  if (m.empty()) m = LabelMap(h, w);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) m.at(y, x) = label;
  }
  return m;
}

LabelMap permute_labels(const LabelMap& m, std::mt19937_64& rng) {
  std::vector<int> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin() + 1, perm.end(), rng);
  LabelMap out = m;
  for (auto& v : out.values()) v = perm[static_cast<std::size_t>(v)];
  return out;
}

}  // namespace

TEST(PixelDice, HandValues) {
  const auto a = oracle::binarize(rect(4, 4, 0, 0, 2, 2));
  const auto b = oracle::binarize(rect(4, 4, 0, 1, 2, 3));
  EXPECT_DOUBLE_EQ(pixel_dice(a, a), 1.0);
  EXPECT_DOUBLE_EQ(pixel_dice(a, oracle::binarize(rect(4, 4, 2, 2, 4, 4))), 0.0);
  EXPECT_DOUBLE_EQ(pixel_dice(a, b), 0.5);
  EXPECT_DOUBLE_EQ(pixel_dice(BinaryMask(3, 3), BinaryMask(3, 3)), 1.0);
  EXPECT_DOUBLE_EQ(pixel_iou(a, b), 2.0 / 6.0);
  EXPECT_THROW(pixel_dice(a, BinaryMask(3, 4)), ShapeError);
}

TEST(PixelDice, EqualsSoftDiceWithVanishingSmoothing) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = oracle::binarize(oracle::random_label_map(rng, 9, 11, 3));
    const auto g = oracle::binarize(oracle::random_label_map(rng, 9, 11, 3));
    std::vector<double> pv(p.size()), gv(g.size());
    std::copy(p.values().begin(), p.values().end(), pv.begin());
    std::copy(g.values().begin(), g.values().end(), gv.begin());
    if (std::accumulate(pv.begin(), pv.end(), 0.0) + std::accumulate(gv.begin(), gv.end(), 0.0) == 0) continue;
    EXPECT_NEAR(pixel_dice(p, g), soft_dice<double>(pv, gv, 1e-12), 1e-9);
  }
}

TEST(ObjectF1, HandValues) {
  const auto two = rect(10, 10, 0, 5, 4, 9, 2, rect(10, 10, 0, 0, 4, 4));
  EXPECT_DOUBLE_EQ(object_f1(two, two).f1, 1.0);
  const auto one = rect(10, 10, 0, 0, 4, 4);
  const auto s = object_f1(one, two);
  EXPECT_DOUBLE_EQ(s.precision, 1.0);
  EXPECT_DOUBLE_EQ(s.recall, 0.5);
  EXPECT_DOUBLE_EQ(s.f1, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(object_f1(LabelMap(10, 10), two).f1, 0.0);
  EXPECT_DOUBLE_EQ(object_f1(LabelMap(10, 10), LabelMap(10, 10)).f1, 1.0);
}

TEST(ObjectF1, ThresholdIsStrict) {
  // IoU exactly 0.5: 4x4 vs its 4x2 half.
  const auto gt = rect(6, 6, 0, 0, 4, 4);
  const auto half = rect(6, 6, 0, 0, 4, 2);
  EXPECT_EQ(object_f1(half, gt, 0.5).true_positives, 0);
  EXPECT_EQ(object_f1(half, gt, 0.49).true_positives, 1);
}

TEST(ObjectDice, HandValues) {
  const auto gt = rect(6, 6, 0, 0, 4, 4);
  EXPECT_DOUBLE_EQ(object_dice(gt, gt), 1.0);
  EXPECT_DOUBLE_EQ(object_dice(LabelMap(6, 6), gt), 0.0);
  EXPECT_DOUBLE_EQ(object_dice(LabelMap(6, 6), LabelMap(6, 6)), 1.0);
  EXPECT_NEAR(object_dice(rect(6, 6, 0, 0, 4, 2), gt), 2.0 / 3.0, 1e-15);
}

TEST(Metrics, AgreeWithBruteForceOracles) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> side(1, 16);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = side(rng), w = side(rng);
    const auto p = oracle::random_label_map(rng, h, w, 5);
    const auto g = oracle::random_label_map(rng, h, w, 5);
    ASSERT_EQ(pixel_dice(oracle::binarize(p), oracle::binarize(g)),
              oracle::pixel_dice(oracle::binarize(p), oracle::binarize(g)));
    ASSERT_EQ(object_f1(p, g).f1, oracle::object_f1(p, g, 0.5)) << trial;
    ASSERT_NEAR(object_dice(p, g), oracle::object_dice(p, g), 1e-14) << trial;
  }
}

TEST(Metrics, InvariantUnderLabelPermutation) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = oracle::random_label_map(rng, 12, 12, 6);
    const auto g = oracle::random_label_map(rng, 12, 12, 6);
    const auto pp = permute_labels(p, rng), gp = permute_labels(g, rng);
    EXPECT_EQ(object_f1(p, g).true_positives, object_f1(pp, gp).true_positives);
    EXPECT_NEAR(object_dice(p, g), object_dice(pp, gp), 1e-12);
  }
}

TEST(Metrics, GreedyMatchingIsOptimalAboveHalfIoU) {
  // With IoU > 0.5 every object has at most one admissible partner, so the
  // greedy count equals the maximum matching.
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = oracle::random_label_map(rng, 10, 10, 5);
    const auto g = oracle::random_label_map(rng, 10, 10, 5);
    EXPECT_EQ(object_f1(p, g, 0.5).true_positives, oracle::optimal_true_positives(p, g, 0.5));
  }
}

TEST(Report, MeansArePerImageMeans) {
  std::mt19937_64 rng(8);
  std::vector<ImageMetrics> per;
  for (int i = 0; i < 7; ++i) {
    per.push_back(evaluate_image("img" + std::to_string(i), oracle::random_label_map(rng, 12, 12, 4),
                                 oracle::random_label_map(rng, 12, 12, 4)));
  }
  const auto r = aggregate(per);
  double pd = 0, of = 0, od = 0;
  for (const auto& m : per) {
    pd += m.pixel_dice;
    of += m.object_f1;
    od += m.object_dice;
  }
  EXPECT_NEAR(r.pixel_dice, pd / 7, 1e-15);
  EXPECT_NEAR(r.object_f1, of / 7, 1e-15);
  EXPECT_NEAR(r.object_dice, od / 7, 1e-15);
  const auto j = to_json(r);
  EXPECT_EQ(j["per_image"].size(), 7u);
  EXPECT_DOUBLE_EQ(j["pixel_dice"].get<double>(), r.pixel_dice);
  EXPECT_NE(to_table(r).find("img6"), std::string::npos);
}
