#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promodet/apm.hpp"

using namespace promodet;
using nn::Shape;
using nn::Tensor;

namespace {

PyramidFeatures<float> fake_pyramid(nn::Tape<float>& tape, const AnchorSet& a, int n, int width,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0, 1);
  PyramidFeatures<float> p;
  for (int l = 0; l < a.num_levels(); ++l) {
    Tensor<float> t({n, width, a.feature_size[l], a.feature_size[l]});
    for (auto& v : t.vec()) v = g(rng);
    p.levels.push_back(tape.constant(std::move(t)));
  }
  return p;
}

}  // namespace

TEST(ApmHeads, ShapeContract384) {
  const auto levels = default_levels(384);
  const AnchorSet anchors = generate_anchors(384, levels);
  nn::ParamStore<float> store(1);
  ApmHeads<float> heads(store, anchors, 16, ApmConfig{});
  nn::Tape<float> tape(false);
  const auto out = heads(tape, fake_pyramid(tape, anchors, 2, 16, 1), false);
  const int sizes[] = {48, 24, 12, 6, 3, 1};
  const int a[] = {6, 6, 6, 6, 4, 4};
  for (int l = 0; l < 6; ++l) {
    EXPECT_EQ(out.score_logits[l]->value.shape(), (Shape{2, a[l], sizes[l], sizes[l]}));
    EXPECT_EQ(out.deltas[l]->value.shape(), (Shape{2, 4 * a[l], sizes[l], sizes[l]}));
  }
  EXPECT_EQ(out.scores(anchors, 1).size(), 18400u);
  EXPECT_EQ(out.box_deltas(anchors, 0).size(), 18400u);
}

TEST(ApmHeads, InitialStateIsIdentityPromotion) {
  const AnchorSet anchors = generate_anchors(256, default_levels(256));
  nn::ParamStore<float> store(1);
  ApmHeads<float> heads(store, anchors, 8, ApmConfig{});
  nn::Tape<float> tape(false);
  const auto out = heads(tape, fake_pyramid(tape, anchors, 1, 8, 2), false);
  const auto p = promote(anchors, out, 0);
  ASSERT_EQ(p.boxes.size(), anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) ASSERT_EQ(p.boxes[i], anchors.boxes[i]);
  EXPECT_EQ(p.clamped, 0);
  // score bias starts at the 0.01 prior; small weights keep scores near it
  for (double s : p.scores) {
    ASSERT_GT(s, 0.003);
    ASSERT_LT(s, 0.03);
  }
}

TEST(ApmHeads, ScoringOffGivesUnitScores) {
  const AnchorSet anchors = generate_anchors(256, default_levels(256));
  nn::ParamStore<float> store(1);
  ApmConfig cfg;
  cfg.scoring = false;
  ApmHeads<float> heads(store, anchors, 8, cfg);
  EXPECT_EQ(store.find("apm.level1.score.weight"), nullptr);
  nn::Tape<float> tape(false);
  const auto out = heads(tape, fake_pyramid(tape, anchors, 1, 8, 3), false);
  for (double s : out.scores(anchors, 0)) ASSERT_EQ(s, 1.0);
  EXPECT_TRUE(out.logits(anchors, 0).empty());
}

TEST(ApmHeads, AdjustmentOffGivesIdentityBoxes) {
  const AnchorSet anchors = generate_anchors(256, default_levels(256));
  nn::ParamStore<float> store(1);
  ApmConfig cfg;
  cfg.adjustment = false;
  ApmHeads<float> heads(store, anchors, 8, cfg);
  EXPECT_EQ(store.find("apm.level1.delta.weight"), nullptr);
  nn::Tape<float> tape(false);
  const auto out = heads(tape, fake_pyramid(tape, anchors, 1, 8, 4), false);
  const auto p = promote(anchors, out, 0);
  for (std::size_t i = 0; i < anchors.size(); ++i) ASSERT_EQ(p.boxes[i], anchors.boxes[i]);
}

TEST(ApmHeads, BothBranchesOffIsConfigError) {
  ApmConfig cfg;
  cfg.scoring = false;
  cfg.adjustment = false;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const AnchorSet anchors = generate_anchors(256, default_levels(256));
  nn::ParamStore<float> store(1);
  EXPECT_THROW(ApmHeads<float>(store, anchors, 8, cfg), ConfigError);
  cfg.enabled = false;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(ApmHeads, DeltasCarryGradients) {
  const AnchorSet anchors = generate_anchors(128, default_levels(128));
  nn::ParamStore<float> store(1);
  ApmHeads<float> heads(store, anchors, 4, ApmConfig{});
  nn::Tape<float> tape(true);
  const auto out = heads(tape, fake_pyramid(tape, anchors, 1, 4, 5), true);
  out.deltas[0]->grad = Tensor<float>(out.deltas[0]->value.shape(), 1.f);
  tape.backward();
  const auto& gw = store.find("apm.level1.delta.weight")->var->grad;
  ASSERT_FALSE(gw.empty());
  double s = 0;
  for (float v : gw.vec()) s += std::abs(v);
  EXPECT_GT(s, 0);
}

TEST(Promote, ExampleDeltas) {
  const Box a = Box::from_center(50, 50, 20, 20);
  const std::vector<Box> anchors{a};
  const std::vector<BoxDeltas> d{{0.5, 0, std::log(2.0), 0}};
  const std::vector<double> s{0.7};
  const auto p = promote(anchors, d, s);
  EXPECT_NEAR(p.boxes[0].cx(), 60, 1e-12);
  EXPECT_NEAR(p.boxes[0].cy(), 50, 1e-12);
  EXPECT_NEAR(p.boxes[0].width(), 40, 1e-12);
  EXPECT_NEAR(p.boxes[0].height(), 20, 1e-12);
  EXPECT_EQ(p.scores[0], 0.7);
}

TEST(Promote, LiftsAnIgnoredAnchorToPositive) {
  // GT [0,10]^2; anchor shifted right by s with IoU (10-s)/(10+s) = 0.4.
  const Box gt{0, 0, 10, 10};
  const double s0 = 30.0 / 7.0;
  const Box far{s0, 0, 10 + s0, 10};
  ASSERT_NEAR(iou(far, gt), 0.4, 1e-12);
  // A second anchor equal to the GT takes the forced match.
  const std::vector<Box> anchors{gt, far};
  // Promote `far` to a box with IoU 0.55 against the GT.
  const double s1 = 4.5 / 1.55;
  const Box target{s1, 0, 10 + s1, 10};
  ASSERT_NEAR(iou(target, gt), 0.55, 1e-12);
  const std::vector<BoxDeltas> d{{0, 0, 0, 0}, encode(far, target)};
  const std::vector<double> scores{0.9, 0.9};
  const auto p = promote(anchors, d, scores);
  const std::vector<Box> gts{gt};
  const auto before = match(anchors, gts, 0.5, 0.3);
  const auto after = match(p.boxes, gts, 0.5, 0.3);
  EXPECT_EQ(before.labels[1], Label::kIgnore);
  EXPECT_EQ(after.labels[1], Label::kPositive);
  EXPECT_NEAR(iou(p.boxes[1], gt), 0.55, 1e-9);
}

TEST(Promote, ClampsExtremeShapeDeltas) {
  const std::vector<Box> anchors{Box::from_center(50, 50, 16, 16),
                                 Box::from_center(50, 50, 16, 16),
                                 Box::from_center(50, 50, 16, 16)};
  const std::vector<BoxDeltas> d{{0, 0, -10, 0}, {0, 0, 700, 700}, {0, 0, 0, 0}};
  const std::vector<double> s(3, 0.5);
  const auto p = promote(anchors, d, s);
  EXPECT_EQ(p.clamped, 1);
  EXPECT_NEAR(p.boxes[0].width(), 1.0, 1e-12);  // 16 / 62.5 < 1 px
  EXPECT_NEAR(p.boxes[0].cx(), 50, 1e-12);
  EXPECT_NEAR(p.boxes[1].width(), 1000, 1e-9);  // capped at 62.5x
  EXPECT_NEAR(p.boxes[1].height(), 1000, 1e-9);
  EXPECT_EQ(p.boxes[2], anchors[2]);
}

TEST(Promote, MisalignedInputsThrow) {
  const std::vector<Box> anchors{Box{0, 0, 4, 4}};
  const std::vector<BoxDeltas> d;
  const std::vector<double> s{0.5};
  EXPECT_THROW(promote(anchors, d, s), ShapeError);
}

TEST(Promote, NonFiniteDeltaThrows) {
  const std::vector<Box> anchors{Box{0, 0, 4, 4}};
  const std::vector<BoxDeltas> d{{NAN, 0, 0, 0}};
  const std::vector<double> s{0.5};
  EXPECT_THROW(promote(anchors, d, s), GeometryError);
}
