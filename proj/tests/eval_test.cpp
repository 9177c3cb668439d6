#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ap_oracle.hpp"
#include "mamat/eval.hpp"
#include "test_util.hpp"

namespace mamat::eval {
namespace {

using mamat::testing::random_tensor;
using testing::random_instance;

using testing::det;
using testing::gt;
using testing::Oracle;

TEST(Psnr, Fixtures) {
  std::mt19937_64 rng(1);
  const auto a = random_tensor<float>({1, 16, 16}, rng, 0.2, 0.8);
  EXPECT_EQ(psnr(a, a), 100.0);
  const Tensor<float> zero({3, 8, 8}, 0.0f);
  const Tensor<float> tenth({3, 8, 8}, 0.1f);
  EXPECT_NEAR(psnr(zero, tenth), 20.0, 0.01);
  EXPECT_NEAR(psnr(tenth, zero), 20.0, 1e-5);
  EXPECT_THROW(psnr(zero, Tensor<float>({3, 8, 7}, 0.0f)), ShapeError);
}

TEST(Psnr, DecreasesWithNoiseAmplitude) {
  std::mt19937_64 rng(2);
  const auto base = random_tensor<float>({1, 32, 32}, rng, 0.3, 0.7);
  const auto noise = random_tensor<float>({1, 32, 32}, rng, -1.0, 1.0);
  double prev = 1e9;
  for (float amp : {0.001f, 0.01f, 0.05f, 0.1f, 0.2f}) {
    Tensor<float> b = base;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += amp * noise[i];
    const double p = psnr(base, b);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Ssim, Fixtures) {
  const Tensor<float> a({16, 16}, 0.5f);
  const Tensor<float> b({16, 16}, 0.7f);
  const double c1 = 1e-4;
  const double expected = (2 * 0.5 * double(0.7f) + c1) / (0.25 + double(0.7f) * double(0.7f) + c1);
  EXPECT_NEAR(ssim(a, b), 0.9461, 1e-3);
  EXPECT_NEAR(ssim(a, b), expected, 1e-9);
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({3, 20, 24}, rng, 0.0, 1.0);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
}

TEST(Ssim, SymmetricBoundedAndBelowOneForDifferentInputs) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    const auto x = random_tensor<float>({1, 12, 15}, rng, 0.0, 1.0);
    const auto y = random_tensor<float>({1, 12, 15}, rng, 0.0, 1.0);
    const double s = ssim(x, y);
    EXPECT_DOUBLE_EQ(s, ssim(y, x));
    EXPECT_GE(s, -1.0);
    EXPECT_LT(s, 1.0 - 1e-9);
  }
}

TEST(Ssim, Errors) {
  EXPECT_THROW(ssim(Tensor<float>({10, 11}, 0.0f), Tensor<float>({10, 11}, 0.0f)), ShapeError);
  EXPECT_THROW(ssim(Tensor<float>({11, 11}, 0.0f), Tensor<float>({11, 12}, 0.0f)), ShapeError);
  EXPECT_NO_THROW(ssim(Tensor<float>({11, 11}, 0.0f), Tensor<float>({11, 11}, 0.0f)));
}

TEST(Iou, Fixtures) {
  const auto a = gt("i", 0, 0, 0, 2, 2);
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_NEAR(iou(a, gt("i", 0, 1, 1, 3, 3)), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou(a, gt("i", 0, 2, 0, 4, 2)), 0.0);
  EXPECT_EQ(iou(a, gt("i", 0, 5, 5, 6, 6)), 0.0);
  EXPECT_THROW(iou(a, gt("i", 0, 1, 1, 1, 3)), std::invalid_argument);
}

TEST(Match, Fixtures) {
  const std::vector<Box> g{gt("i", 0, 0, 0, 10, 10)};
  EXPECT_EQ(match_detections({det("i", 0, 0, 0, 10, 6, 0.9)}, g, 0.5), std::vector<MatchResult>{MatchResult::tp});
  EXPECT_EQ(match_detections({det("i", 0, 0, 0, 10, 10, 0.9), det("i", 0, 0, 0, 10, 9, 0.8)}, g, 0.5),
            (std::vector<MatchResult>{MatchResult::tp, MatchResult::fp}));
  EXPECT_EQ(match_detections({det("i", 0, 0, 0, 10, 4.5, 0.9)}, g, 0.5), std::vector<MatchResult>{MatchResult::fp});
}

TEST(Match, PrefersHighestIouAndCountedTruth) {
  const std::vector<Box> g{gt("i", 0, 0, 0, 10, 10), gt("i", 0, 0, 0, 10, 8)};
  const auto d = det("i", 0, 0, 0, 10, 8, 0.9);
  EXPECT_EQ(match_detections({d, det("i", 0, 0, 0, 10, 10, 0.5)}, g, 0.5),
            (std::vector<MatchResult>{MatchResult::tp, MatchResult::tp}));
  EXPECT_EQ(match_detections({d}, g, 0.5, {false, true}), std::vector<MatchResult>{MatchResult::tp});
  EXPECT_EQ(match_detections({d}, g, 0.5, {true, true}), std::vector<MatchResult>{MatchResult::ignored});
}

TEST(AveragePrecision, Fixtures) {
  EXPECT_EQ(*average_precision({true}, 1), 1.0);
  EXPECT_NEAR(*average_precision({false, true}, 1), 0.5, 1e-15);
  EXPECT_EQ(*average_precision({false, false}, 2), 0.0);
  EXPECT_EQ(*average_precision({}, 3), 0.0);
  EXPECT_FALSE(average_precision({}, 0).has_value());
  EXPECT_FALSE(average_precision({false}, 0).has_value());
  // Half recall at precision 1: points 0..50 score 1, the rest 0.
  EXPECT_NEAR(*average_precision({true}, 2), 51.0 / 101.0, 1e-15);
}

TEST(MapEvaluate, IouSixFixture) {
  const auto r = map_evaluate({det("a", 3, 0, 0, 10, 6, 0.7)}, {gt("a", 3, 0, 0, 10, 10)});
  EXPECT_EQ(r.mean, 0.3);
  EXPECT_EQ(r.per_class.at(3)[2], 1.0);
  EXPECT_EQ(r.per_class.at(3)[3], 0.0);
}

TEST(MapEvaluate, PerfectDetections) {
  std::vector<Box> g, d;
  for (int i = 0; i < 6; ++i) {
    g.push_back(gt("im" + std::to_string(i % 3), i % 2, i, 2 * i, i + 5.5, 2 * i + 3));
    d.push_back(det(g.back().image_id, g.back().class_id, g.back().x_min, g.back().y_min, g.back().x_max,
                    g.back().y_max, 0.1 * i + 0.05));
  }
  const auto r = map_evaluate(d, g);
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_EQ(r.per_class.size(), 2u);
}

TEST(MapEvaluate, SmallSlice) {
  const std::vector<Box> g{gt("a", 0, 0, 0, 10, 10), gt("a", 0, 50, 50, 100, 100)};
  const std::vector<Box> d{det("a", 0, 50, 50, 100, 100, 0.9), det("a", 0, 0, 0, 10, 10, 0.8),
                           det("a", 0, 200, 200, 210, 210, 0.7)};
  const auto all = map_evaluate(d, g);
  const auto small = map_evaluate(d, g, SizeFilter::small);
  // Large-object detection is ignored for the small slice; the stray box is still a false positive.
  EXPECT_NEAR(all.mean, 1.0, 1e-12);
  EXPECT_NEAR(small.mean, 1.0, 1e-12);
  const auto small2 = map_evaluate({det("a", 0, 200, 200, 210, 210, 0.95), d[1]}, g, SizeFilter::small);
  EXPECT_NEAR(small2.mean, 0.5, 1e-12);
  const auto none = map_evaluate(d, {gt("a", 0, 50, 50, 100, 100)}, SizeFilter::small);
  EXPECT_TRUE(std::isnan(none.mean));
  EXPECT_TRUE(none.per_class.empty());
}

TEST(MapEvaluate, UnknownImageRejected) {
  EXPECT_THROW(map_evaluate({det("b", 0, 0, 0, 1, 1, 0.5)}, {gt("a", 0, 0, 0, 1, 1)}), std::invalid_argument);
}

TEST(MapEvaluate, MonotoneScoreTransformInvariant) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Box> g, d;
  for (int i = 0; i < 20; ++i) {
    const double x = 40 * u(rng), y = 40 * u(rng);
    g.push_back(gt("im" + std::to_string(i % 4), i % 3, x, y, x + 5 + 20 * u(rng), y + 5 + 20 * u(rng)));
    const auto& b = g.back();
    d.push_back(det(b.image_id, b.class_id, b.x_min + 3 * u(rng), b.y_min + 3 * u(rng), b.x_max + 3 * u(rng),
                    b.y_max, u(rng)));
  }
  const double base = map_evaluate(d, g).mean;
  for (auto& b : d) b.score = std::pow(*b.score, 3.0);
  EXPECT_EQ(map_evaluate(d, g).mean, base);
}

TEST(MapEvaluate, DuplicatesNeverHelp) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Box> g, d;
    for (int i = 0; i < 4; ++i) {
      const double x = 30 * u(rng), y = 30 * u(rng);
      g.push_back(gt("a", 0, x, y, x + 8, y + 8));
      d.push_back(det("a", 0, x + 2 * u(rng), y, x + 8, y + 8 - 2 * u(rng), u(rng)));
    }
    const double base = map_evaluate(d, g).mean;
    auto dup = d;
    dup.push_back(d[trial % 4]);
    dup.back().score = u(rng);
    EXPECT_LE(map_evaluate(dup, g).mean, base + 1e-12);
  }
}

TEST(MapEvaluate, MatchesBruteForceOracle) {
  int nontrivial = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const auto [d, g] = random_instance(rng);
    for (bool small : {false, true}) {
      const double got = map_evaluate(d, g, small ? SizeFilter::small : SizeFilter::all).mean;
      const double want = Oracle::map(d, g, small);
      if (std::isnan(want)) {
        EXPECT_TRUE(std::isnan(got)) << "seed " << seed;
        continue;
      }
      EXPECT_NEAR(got, want, 1e-9) << "seed " << seed << (small ? " small" : "");
      nontrivial += (want > 0 && want < 1);
    }
  }
  EXPECT_GT(nontrivial, 100);
}

TEST(BoxCsv, RoundTripAndErrors) {
  const std::vector<Box> d{det("a", 1, 0.5, 1, 2.25, 3, 0.125), det("b", 2, 0, 0, 1, 1, 1.0)};
  std::stringstream ss;
  write_boxes(ss, d);
  const auto back = read_boxes(ss, true);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].image_id, "a");
  EXPECT_EQ(back[0].x_max, 2.25);
  EXPECT_EQ(*back[0].score, 0.125);
  EXPECT_EQ(back[1].class_id, 2);

  std::istringstream g("image_id,class_id,x_min,y_min,x_max,y_max\nq,0,1,1,4,4\n\n");
  EXPECT_EQ(read_boxes(g, false).size(), 1u);
  std::istringstream bad_header("id,class,x0,y0,x1,y1\n");
  EXPECT_THROW(read_boxes(bad_header, false), FormatError);
  std::istringstream short_row("image_id,class_id,x_min,y_min,x_max,y_max\nq,0,1,1,4\n");
  EXPECT_THROW(read_boxes(short_row, false), FormatError);
  std::istringstream nan_cell("image_id,class_id,x_min,y_min,x_max,y_max\nq,0,1,x,4,4\n");
  EXPECT_THROW(read_boxes(nan_cell, false), FormatError);
  std::istringstream degenerate("image_id,class_id,x_min,y_min,x_max,y_max\nq,0,4,1,4,4\n");
  EXPECT_THROW(read_boxes(degenerate, false), FormatError);
}

}  // namespace
}  // namespace mamat::eval
