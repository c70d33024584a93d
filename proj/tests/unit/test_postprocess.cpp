#include <random>

#include <gtest/gtest.h>

#include "glandseg/postprocess.hpp"
#include "oracles.hpp"

using namespace glandseg;

namespace {

ProbabilityPair constant_maps(int h, int w, float g, float c) {
  return {ProbabilityMap(h, w, 1, g), ProbabilityMap(h, w, 1, c)};
}

// Two 20x20 gland squares joined by a 3-px strip that is gland and contour at once.
ProbabilityPair two_squares() {
  auto p = constant_maps(40, 60, 0.05f, 0.05f);
  for (int y = 10; y < 30; ++y) {
    for (int x = 8; x < 51; ++x) p.gland.at(y, x) = 0.9f;
    for (int x = 28; x < 31; ++x) p.contour.at(y, x) = 0.9f;
  }
  return p;
}

FusionConfig no_size_filter() {
  FusionConfig cfg;
  cfg.min_object_px = 0;
  return cfg;
}

int components(const BinaryMask& m, int conn) {
  int n = 0;
  oracle::flood_components(m, conn, &n);
  return n;
}

}  // namespace

TEST(Fuse, ConfidentEverywhereIsOneObject) {
  const auto r = fuse(constant_maps(30, 40, 0.9f, 0.1f), no_size_filter());
  EXPECT_EQ(r.object_count, 1);
  for (const auto v : r.labels.values()) ASSERT_EQ(v, 1);
}

TEST(Fuse, LowGlandIsEmpty) {
  const auto r = fuse(constant_maps(30, 40, 0.1f, 0.1f), no_size_filter());
  EXPECT_EQ(r.object_count, 0);
  for (const auto v : r.binary_mask.values()) ASSERT_EQ(v, 0);
}

TEST(Fuse, ContourStripSeparatesTwoSquares) {
  const auto probs = two_squares();
  const auto seed = fusion_seed(probs, no_size_filter());
  EXPECT_EQ(components(seed, 8), 2);
  const auto r = fuse(probs, no_size_filter());
  EXPECT_EQ(r.object_count, 2);
  EXPECT_NE(r.labels.at(20, 15), r.labels.at(20, 45));
  EXPECT_GT(r.labels.at(20, 15), 0);
  EXPECT_GT(r.labels.at(20, 45), 0);
  // Without the strip the squares merge.
  auto merged = probs;
  for (auto& v : merged.contour.values()) v = 0.05f;
  EXPECT_EQ(fuse(merged, no_size_filter()).object_count, 1);
}

TEST(Fuse, ForegroundMonotoneInGlandThreshold) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ProbabilityPair p{ProbabilityMap(48, 48), ProbabilityMap(48, 48)};
  for (auto& v : p.gland.values()) v = u(rng);
  for (auto& v : p.contour.values()) v = u(rng) * 0.8f;
  FusionConfig cfg;
  cfg.min_object_px = 0;
  cfg.fill_holes = false;
  cfg.restore_dilate_px = 0;
  long prev = -1;
  for (double tau = 0.95; tau >= 0.05; tau -= 0.05) {
    cfg.tau_gland = tau;
    const auto r = fuse(p, cfg);
    long fg = 0;
    for (const auto v : r.binary_mask.values()) fg += v;
    EXPECT_GE(fg, prev) << tau;
    prev = fg;
  }
  // The default pipeline is monotone too on the two-squares map.
  const auto sq = two_squares();
  long last = -1;
  for (double tau = 0.95; tau >= 0.05; tau -= 0.1) {
    auto c = no_size_filter();
    c.tau_gland = tau;
    long fg = 0;
    for (const auto v : fuse(sq, c).binary_mask.values()) fg += v;
    EXPECT_GE(fg, last);
    last = fg;
  }
}

TEST(Components, EmptyMaskHasNone) {
  int n = -1;
  label_components(BinaryMask(10, 10), 8, &n);
  EXPECT_EQ(n, 0);
}

TEST(Components, CheckerboardAndDiagonals) {
  BinaryMask board(6, 6);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 6; ++x) board.at(y, x) = (x + y) % 2 == 0;
  }
  int n4 = 0, n8 = 0;
  const auto l4 = label_components(board, 4, &n4);
  label_components(board, 8, &n8);
  EXPECT_EQ(n4, 18);
  EXPECT_EQ(n8, 1);
  EXPECT_EQ(l4, oracle::flood_components(board, 4));
  BinaryMask diag(3, 3);
  diag.at(0, 0) = diag.at(1, 1) = 1;
  label_components(diag, 4, &n4);
  label_components(diag, 8, &n8);
  EXPECT_EQ(n4, 2);
  EXPECT_EQ(n8, 1);
  EXPECT_THROW(label_components(diag, 6), InputError);
}

TEST(Components, RandomMasksMatchFloodFill) {
  std::mt19937_64 rng(7);
  std::bernoulli_distribution b(0.45);
  for (int trial = 0; trial < 100; ++trial) {
    BinaryMask m(3 + trial % 17, 2 + trial % 13);
    for (auto& v : m.values()) v = b(rng);
    for (const int conn : {4, 8}) ASSERT_EQ(label_components(m, conn), oracle::flood_components(m, conn));
  }
}

TEST(RemoveSmall, DropsComponentsBelowThreshold) {
  LabelMap m(10, 10);
  m.at(0, 0) = 1;
  for (int x = 0; x < 5; ++x) m.at(5, x) = 2;
  const auto r = remove_small_components(m, 3);
  EXPECT_EQ(r.at(0, 0), 0);
  EXPECT_EQ(r.at(5, 2), 2);
  EXPECT_EQ(scaled_min_object_px(500, 522, 775), 500);
  EXPECT_EQ(scaled_min_object_px(500, 261, 775), 250);
}

TEST(FillHoles, FillsEnclosedBackgroundOnly) {
  LabelMap m(9, 9);
  for (int y = 1; y < 8; ++y) {
    for (int x = 1; x < 8; ++x) m.at(y, x) = (y == 1 || y == 7 || x == 1 || x == 7) ? 1 : 0;
  }
  const auto f = fill_holes(m);
  EXPECT_EQ(f.at(4, 4), 1);
  EXPECT_EQ(f.at(0, 0), 0);
  // A gap reaching the border is not a hole.
  LabelMap open = m;
  open.at(4, 7) = 0;
  open.at(4, 8) = 0;
  EXPECT_EQ(fill_holes(open).at(4, 4), 0);
}

TEST(ConstrainedDilate, NeverMergesLabels) {
  LabelMap m(5, 9);
  for (int y = 0; y < 5; ++y) {
    m.at(y, 2) = 1;
    m.at(y, 6) = 2;
  }
  const auto d = constrained_dilate(m, 3);
  for (int y = 0; y < 5; ++y) {
    EXPECT_EQ(d.at(y, 0), 1);
    EXPECT_EQ(d.at(y, 3), 1);
    EXPECT_EQ(d.at(y, 4), 0);  // reachable from both in the same step
    EXPECT_EQ(d.at(y, 5), 2);
    EXPECT_EQ(d.at(y, 8), 2);
  }
}

TEST(Relabel, SequentialInRowMajorOrder) {
  LabelMap m(2, 3);
  m.at(0, 2) = 9;
  m.at(1, 0) = 4;
  int n = 0;
  const auto r = relabel_sequential(m, &n);
  EXPECT_EQ(n, 2);
  EXPECT_EQ(r.at(0, 2), 1);
  EXPECT_EQ(r.at(1, 0), 2);
}

TEST(Overlay, MarksBoundariesOnly) {
  const RgbImage img(12, 12, 3, 100);
  LabelMap l(12, 12);
  for (int y = 3; y < 9; ++y) {
    for (int x = 3; x < 9; ++x) l.at(y, x) = 1;
  }
  const auto o = overlay_boundaries(img, l);
  EXPECT_EQ(o.at(0, 0, 1), 100);
  EXPECT_EQ(o.at(3, 3, 1), 255);
  EXPECT_EQ(o.at(3, 3, 0), 0);
}

TEST(FusionConfig, Validation) {
  FusionConfig cfg;
  cfg.tau_gland = 1.5;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = {};
  cfg.min_object_px = -1;
  EXPECT_THROW(cfg.validate(), InputError);
}
