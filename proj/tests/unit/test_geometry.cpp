#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "granudet/geometry.hpp"
#include "granudet/rng.hpp"
#include "oracles.hpp"

using granudet::Box;

namespace {

Box random_box(granudet::Rng& rng) {
  const double x0 = rng.uniform(0, 0.9), y0 = rng.uniform(0, 0.9);
  return {x0, y0, rng.uniform(x0 + 0.01, 1.0), rng.uniform(y0 + 0.01, 1.0)};
}

}  // namespace

TEST(Geometry, IouExamples) {
  EXPECT_DOUBLE_EQ(granudet::iou({0, 0, 1, 1}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(granudet::iou({0, 0, 0.4, 0.4}, {0.6, 0.6, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(granudet::iou({0, 0, 1, 1}, {0, 0, 0.5, 1}), 0.5);
}

TEST(Geometry, DegenerateBoxHasZeroIou) {
  EXPECT_EQ(granudet::iou({0.2, 0.2, 0.2, 0.5}, {0, 0, 1, 1}), 0.0);
  EXPECT_TRUE(std::isfinite(granudet::giou({0.2, 0.2, 0.2, 0.2}, {0.2, 0.2, 0.2, 0.2})));
}

TEST(Geometry, GiouExamples) {
  EXPECT_DOUBLE_EQ(granudet::giou({0.1, 0.2, 0.6, 0.9}, {0.1, 0.2, 0.6, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(granudet::giou({0, 0, 0.5, 0.5}, {0.5, 0.5, 1, 1}), -0.5);
  EXPECT_DOUBLE_EQ(granudet::giou({0, 0, 1, 1}, {0.25, 0.25, 0.75, 0.75}), 0.25);
}

TEST(Geometry, L1Examples) {
  const double a[4] = {.5, .5, .2, .2}, b[4] = {.5, .5, .4, .2};
  EXPECT_DOUBLE_EQ(granudet::l1_box_loss(a, a), 0.0);
  EXPECT_NEAR(granudet::l1_box_loss(a, b), 0.2, 1e-15);
  EXPECT_EQ(granudet::l1_box_loss(a, b), granudet::l1_box_loss(b, a));
}

TEST(Geometry, RandomizedProperties) {
  granudet::Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const Box a = random_box(rng), b = random_box(rng), c = random_box(rng);
    const double i = granudet::iou(a, b);
    EXPECT_EQ(i, granudet::iou(b, a));
    EXPECT_GE(i, 0.0);
    EXPECT_LE(i, 1.0);
    EXPECT_DOUBLE_EQ(granudet::iou(a, a), 1.0);
    const bool disjoint = a.x1 <= b.x0 || b.x1 <= a.x0 || a.y1 <= b.y0 || b.y1 <= a.y0;
    EXPECT_EQ(i == 0.0, disjoint);

    const double g = granudet::giou(a, b);
    EXPECT_GE(g, -1.0);
    EXPECT_LE(g, 1.0);
    EXPECT_GE(granudet::giou_loss(a, b), 0.0);
    EXPECT_LE(granudet::giou_loss(a, b), 2.0);
    // Containment: the enclosing box is the outer box, so giou == iou.
    const Box inner{a.x0 + a.width() * 0.25, a.y0 + a.height() * 0.1, a.x1 - a.width() * 0.3, a.y1 - a.height() * 0.2};
    EXPECT_NEAR(granudet::giou(a, inner), granudet::iou(a, inner), 1e-12);

    const auto cc = a.to_center();
    const Box back = Box::from_center(cc);
    EXPECT_NEAR(back.x0, a.x0, 1e-9);
    EXPECT_NEAR(back.y0, a.y0, 1e-9);
    EXPECT_NEAR(back.x1, a.x1, 1e-9);
    EXPECT_NEAR(back.y1, a.y1, 1e-9);

    // L1 triangle inequality.
    const auto ca = a.to_center(), cb = b.to_center(), c3 = c.to_center();
    EXPECT_LE(granudet::l1_box_loss(ca, c3), granudet::l1_box_loss(ca, cb) + granudet::l1_box_loss(cb, c3) + 1e-12);
  }
}

TEST(Geometry, NmsExamples) {
  std::vector<Box> one{{0, 0, 1, 1}};
  std::vector<double> s1{0.3};
  EXPECT_EQ(granudet::class_agnostic_nms(one, s1, 0.5), std::vector<int>{0});
  std::vector<Box> two{{0.1, 0.1, 0.5, 0.5}, {0.1, 0.1, 0.5, 0.5}};
  std::vector<double> s2{0.8, 0.9};
  EXPECT_EQ(granudet::class_agnostic_nms(two, s2, 0.5), std::vector<int>{1});
  std::vector<double> tie{0.5, 0.5};
  EXPECT_EQ(granudet::class_agnostic_nms(two, tie, 0.5), std::vector<int>{0});
}

TEST(Geometry, NmsMatchesGreedyOracle) {
  granudet::Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 10);
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_box(rng));
      // Coarse scores so ties occur.
      scores.push_back(std::round(rng.uniform() * 5) / 5);
    }
    const double thr = rng.uniform(0.1, 0.7);
    auto got = granudet::class_agnostic_nms(boxes, scores, thr);
    auto want = granudet::oracle::greedy_nms(boxes, scores, thr);
    ASSERT_EQ(got, want) << "trial " << trial;
  }
}
