#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "promodet/geometry.hpp"

using namespace promodet;

TEST(Iou, IdentityDisjointAndOverlap) {
  const Box b{3, 4, 10, 12};
  EXPECT_DOUBLE_EQ(iou(b, b), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {5, 5, 6, 6}), 0.0);
  EXPECT_NEAR(iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0, 1e-15);
}

TEST(Iou, TouchingEdgesDoNotOverlap) { EXPECT_EQ(iou({0, 0, 1, 1}, {1, 0, 2, 1}), 0.0); }

TEST(Iou, DegenerateBoxThrows) {
  EXPECT_THROW(iou({0, 0, 0, 1}, {0, 0, 1, 1}), GeometryError);
  EXPECT_THROW(iou({0, 0, 1, 1}, {2, 2, 1, 3}), GeometryError);
  EXPECT_THROW(iou({0, 0, NAN, 1}, {0, 0, 1, 1}), GeometryError);
}

TEST(Iou, SymmetricBoundedMatchesOracle) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 2000; ++k) {
    const Box a = oracle::random_box(rng, 100, 1, 60);
    const Box b = oracle::random_box(rng, 100, 1, 60);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, oracle::iou(a, b), 1e-12);
  }
}

TEST(Box, CenterFormRoundTrip) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 500; ++k) {
    const Box b = oracle::random_box(rng, 500, 0.5, 200);
    const Box r = Box::from_center(b.cx(), b.cy(), b.width(), b.height());
    EXPECT_NEAR(r.x1, b.x1, 1e-6);
    EXPECT_NEAR(r.y1, b.y1, 1e-6);
    EXPECT_NEAR(r.x2, b.x2, 1e-6);
    EXPECT_NEAR(r.y2, b.y2, 1e-6);
  }
}

TEST(Encode, Examples) {
  const Box a = Box::from_center(10, 10, 4, 4);
  EXPECT_EQ(encode(a, a), (BoxDeltas{0, 0, 0, 0}));
  const BoxDeltas d = encode(a, Box::from_center(12, 10, 8, 4));
  EXPECT_DOUBLE_EQ(d.dx, 0.5);
  EXPECT_DOUBLE_EQ(d.dy, 0.0);
  EXPECT_DOUBLE_EQ(d.dw, std::log(2.0));
  EXPECT_DOUBLE_EQ(d.dh, 0.0);
}

TEST(Encode, InvalidTargetThrows) {
  const Box a{0, 0, 4, 4};
  EXPECT_THROW(encode(a, {1, 1, 1, 3}), GeometryError);
  EXPECT_THROW(encode(a, {1, 1, 3, 0}), GeometryError);
}

TEST(Decode, Examples) {
  const Box a = Box::from_center(10, 10, 4, 4);
  EXPECT_EQ(decode(a, {0, 0, 0, 0}), a);
  const Box b = decode(a, {0.5, 0, std::log(2.0), 0});
  EXPECT_NEAR(b.cx(), 12, 1e-12);
  EXPECT_NEAR(b.cy(), 10, 1e-12);
  EXPECT_NEAR(b.width(), 8, 1e-12);
  EXPECT_NEAR(b.height(), 4, 1e-12);
}

TEST(Decode, OverflowAndNonFiniteThrow) {
  const Box a{0, 0, 4, 4};
  EXPECT_THROW(decode(a, {0, 0, 700, 0}), GeometryError);
  EXPECT_THROW(decode(a, {NAN, 0, 0, 0}), GeometryError);
  EXPECT_THROW(decode(a, {0, 0, 0, INFINITY}), GeometryError);
}

TEST(Decode, InvertsEncode) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 2000; ++k) {
    const Box a = oracle::random_box(rng, 400, 2, 300);
    const Box g = oracle::random_box(rng, 400, 2, 300);
    const Box r = decode(a, encode(a, g));
    const double scale = std::max({std::abs(g.x1), std::abs(g.x2), g.width(), 1.0});
    EXPECT_NEAR(r.x1, g.x1, 1e-5 * scale);
    EXPECT_NEAR(r.y1, g.y1, 1e-5 * std::max({std::abs(g.y1), g.height(), 1.0}));
    EXPECT_NEAR(r.x2, g.x2, 1e-5 * scale);
    EXPECT_NEAR(r.y2, g.y2, 1e-5 * std::max({std::abs(g.y2), g.height(), 1.0}));
  }
}

TEST(SoftNms, Examples) {
  EXPECT_TRUE(soft_nms_linear({}, 0.3, 0.01).empty());
  const ScoredBox one{{0, 0, 10, 10}, 0.9, 1};
  const auto r1 = soft_nms_linear(std::vector<ScoredBox>{one}, 0.3, 0.01);
  ASSERT_EQ(r1.size(), 1u);
  EXPECT_EQ(r1[0].score, 0.9);

  // IoU 0.2 < 0.3 leaves both alone: [0,12]x[0,10] vs [8,20]x[0,10] -> 4/20 = 0.2
  const std::vector<ScoredBox> low{{{0, 0, 12, 10}, 0.9, 1}, {{8, 0, 20, 10}, 0.8, 1}};
  ASSERT_NEAR(iou(low[0].box, low[1].box), 0.2, 1e-12);
  const auto r2 = soft_nms_linear(low, 0.3, 0.01);
  ASSERT_EQ(r2.size(), 2u);
  EXPECT_EQ(r2[1].score, 0.8);

  // IoU 0.5: [0,30]x[0,10] vs [10,40]x[0,10] -> 20/40
  const std::vector<ScoredBox> high{{{0, 0, 30, 10}, 0.9, 1}, {{10, 0, 40, 10}, 0.8, 1}};
  ASSERT_NEAR(iou(high[0].box, high[1].box), 0.5, 1e-12);
  const auto r3 = soft_nms_linear(high, 0.3, 0.01);
  ASSERT_EQ(r3.size(), 2u);
  EXPECT_NEAR(r3[1].score, 0.4, 1e-12);
}

TEST(SoftNms, ScoreOutOfRangeThrows) {
  const std::vector<ScoredBox> bad{{{0, 0, 1, 1}, 1.5, 1}};
  EXPECT_THROW(soft_nms_linear(bad, 0.3, 0.01), GeometryError);
}

TEST(SoftNms, MatchesOracleAndNeverRaisesScores) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 200; ++t) {
    const int n = static_cast<int>(u(rng) * 51);
    std::vector<ScoredBox> in;
    std::vector<oracle::Scored> ref;
    for (int i = 0; i < n; ++i) {
      const Box b = oracle::random_box(rng, 60, 5, 30);
      const double s = u(rng);
      in.push_back({b, s, 1});
      ref.push_back({b, s});
    }
    const auto got = soft_nms_linear(in, 0.3, 0.01);
    const auto want = oracle::soft_nms(ref, 0.3, 0.01);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(got[i].score, want[i].score, 1e-6);
      EXPECT_EQ(got[i].box, want[i].box);
      if (i > 0) {
        EXPECT_GE(got[i - 1].score, got[i].score);
      }
      // Coordinates unchanged and score not raised.
      bool found = false;
      for (const auto& b : in) {
        if (b.box == got[i].box) {
          found = true;
          EXPECT_LE(got[i].score, b.score);
        }
      }
      EXPECT_TRUE(found);
    }
  }
}

TEST(SoftNms, PermutationInvariant) {
  std::mt19937_64 rng(9);
  std::vector<ScoredBox> in;
  for (int i = 0; i < 40; ++i) {
    // Duplicate scores on purpose to exercise the tie order.
    in.push_back({oracle::random_box(rng, 50, 5, 25), 0.1 * (1 + i % 5), 1 + i % 2});
  }
  const auto ref = soft_nms_linear(in, 0.3, 0.01);
  for (int k = 0; k < 10; ++k) {
    std::shuffle(in.begin(), in.end(), rng);
    const auto got = soft_nms_linear(in, 0.3, 0.01);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].box, ref[i].box);
      EXPECT_EQ(got[i].score, ref[i].score);
    }
  }
}
