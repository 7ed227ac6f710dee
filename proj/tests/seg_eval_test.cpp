#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "sunet/arch.hpp"
#include "sunet/dilation.hpp"
#include "sunet/seg_eval.hpp"

namespace sunet {
namespace {

LabelMap random_labels(Index h, Index w, int k, std::mt19937_64& rng) {
  LabelMap m(1, h, w);
  for (auto& v : m.data) v = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(k));
  return m;
}

TEST(Confusion, PerfectPredictionIsDiagonal) {
  std::mt19937_64 rng(1);
  const auto t = random_labels(8, 8, 3, rng);
  ConfusionMatrix cm(3);
  accumulate(cm, t, t);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) EXPECT_EQ(cm.at(i, j), 0);
  EXPECT_EQ(cm.total(), 64);
}

TEST(Confusion, IgnoredPixelsNotCounted) {
  ConfusionMatrix cm(2);
  accumulate(cm, LabelMap(1, 4, 4, 1), LabelMap(1, 4, 4, kDefaultIgnoreIndex));
  EXPECT_EQ(cm, ConfusionMatrix(2));
}

TEST(Confusion, MatchesDirectTally) {
  std::mt19937_64 rng(2);
  const auto p = random_labels(8, 8, 2, rng);
  const auto t = random_labels(8, 8, 2, rng);
  ConfusionMatrix cm(2);
  accumulate(cm, p, t);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      std::int64_t n = 0;
      for (Index y = 0; y < 8; ++y)
        for (Index x = 0; x < 8; ++x) n += t.at(0, y, x) == a && p.at(0, y, x) == b;
      EXPECT_EQ(cm.at(a, b), n);
    }
}

TEST(Confusion, AdditiveOverDisjointPixels) {
  std::mt19937_64 rng(3);
  const auto p = random_labels(6, 6, 4, rng);
  const auto t = random_labels(6, 6, 4, rng);
  LabelMap top = t, bottom = t;
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 6; ++x) (y < 3 ? bottom : top).at(0, y, x) = kDefaultIgnoreIndex;
  ConfusionMatrix all(4), a(4), b(4);
  accumulate(all, p, t);
  accumulate(a, p, top);
  accumulate(b, p, bottom);
  a += b;
  EXPECT_EQ(a, all);
}

TEST(Confusion, RejectsOutOfRange) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(accumulate(cm, LabelMap(1, 2, 2, 2), LabelMap(1, 2, 2, 0)), std::out_of_range);
  EXPECT_THROW(accumulate(cm, LabelMap(1, 2, 2, 0), LabelMap(1, 2, 2, 5)), std::out_of_range);
  EXPECT_THROW(accumulate(cm, LabelMap(1, 2, 3, 0), LabelMap(1, 2, 2, 0)), ShapeError);
}

ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
  ConfusionMatrix cm(static_cast<int>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) cm.at(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  return cm;
}

// Expands a confusion matrix into pixel ids and measures IoU with set operations.
double set_miou(const ConfusionMatrix& cm) {
  const int k = cm.classes();
  std::vector<std::set<int>> truth(static_cast<std::size_t>(k)), pred(static_cast<std::size_t>(k));
  int id = 0;
  for (int t = 0; t < k; ++t)
    for (int p = 0; p < k; ++p)
      for (std::int64_t n = 0; n < cm.at(t, p); ++n, ++id) {
        truth[static_cast<std::size_t>(t)].insert(id);
        pred[static_cast<std::size_t>(p)].insert(id);
      }
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < k; ++c) {
    std::set<int> inter, uni;
    const auto& a = truth[static_cast<std::size_t>(c)];
    const auto& b = pred[static_cast<std::size_t>(c)];
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(inter, inter.begin()));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::inserter(uni, uni.begin()));
    if (uni.empty()) continue;
    sum += static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    ++used;
  }
  return sum / used;
}

TEST(MeanIoU, WorkedTwoByTwo) {
  const auto cm = from_rows({{3, 1}, {2, 4}});
  const auto r = miou(cm);
  EXPECT_DOUBLE_EQ(r.iou[0], 3.0 / 6.0);
  EXPECT_DOUBLE_EQ(r.iou[1], 4.0 / 7.0);
  EXPECT_NEAR(r.miou, 0.5357142857142857, 1e-15);
  EXPECT_NEAR(r.miou, set_miou(cm), 1e-15);
}

TEST(MeanIoU, PerfectAndAllWrong) {
  EXPECT_EQ(miou(from_rows({{5, 0}, {0, 7}})).miou, 1.0);
  EXPECT_EQ(miou(from_rows({{0, 5}, {7, 0}})).miou, 0.0);
}

TEST(MeanIoU, EmptyUnionsExcludedAndReported) {
  const auto r = miou(from_rows({{4, 0, 0}, {0, 0, 0}, {1, 0, 3}}));
  EXPECT_EQ(r.excluded, (std::vector<int>{1}));
  EXPECT_TRUE(std::isnan(r.iou[1]));
  EXPECT_DOUBLE_EQ(r.miou, (4.0 / 5.0 + 3.0 / 4.0) / 2.0);
  EXPECT_THROW(miou(ConfusionMatrix(3)), std::domain_error);
  EXPECT_THROW(miou(ConfusionMatrix(1)), std::invalid_argument);
}

TEST(MeanIoU, RandomMapsMatchSetComputation) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_labels(16, 16, 2, rng);
    const auto t = random_labels(16, 16, 2, rng);
    ConfusionMatrix cm(2);
    accumulate(cm, p, t);
    EXPECT_NEAR(miou(cm).miou, set_miou(cm), 1e-12);
  }
}

TEST(MeanIoU, PermutationEquivariant) {
  std::mt19937_64 rng(5);
  const auto p = random_labels(10, 10, 4, rng);
  const auto t = random_labels(10, 10, 4, rng);
  const std::vector<int> perm = {2, 0, 3, 1};
  LabelMap pp = p, tp = t;
  for (auto& v : pp.data) v = perm[static_cast<std::size_t>(v)];
  for (auto& v : tp.data) v = perm[static_cast<std::size_t>(v)];
  ConfusionMatrix a(4), b(4);
  accumulate(a, p, t);
  accumulate(b, pp, tp);
  const auto ra = miou(a), rb = miou(b);
  EXPECT_NEAR(ra.miou, rb.miou, 1e-15);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(ra.iou[static_cast<std::size_t>(c)], rb.iou[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])]);
}

TEST(MeanIoU, ReportFormats) {
  const auto r = miou(from_rows({{3, 1}, {2, 4}}));
  std::ostringstream text, csv;
  write_metrics_text(text, r);
  write_metrics_csv(csv, r);
  EXPECT_NE(text.str().find("mIoU 0.535714"), std::string::npos);
  EXPECT_EQ(csv.str().rfind("class,iou\n0,0.5\n", 0), 0u);
}

class MultiScale : public ::testing::Test {
 protected:
  void SetUp() override {
    SUNetConfig c;
    c.name = "toy";
    c.stem_channels = 8;
    c.stem_out = 8;
    c.blocks = {{{1, 4, 8, false}, {1, 4, 8, false}, {1, 4, 8, false}, {1, 4, 8, true}}};
    SegmentationConfig s;
    s.num_classes = 3;
    g = to_segmentation(build_classifier(c, 64, 64), s);
    p = init_params<double>(g, 8);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n;
    image = Tensor<double>({1, 3, 64, 64});
    for (Index i = 0; i < image.size(); ++i) image.data()[i] = n(rng);
  }
  NetworkGraph g;
  ParamStore<double> p;
  Tensor<double> image;
};

TEST_F(MultiScale, UnitScaleIsPlainForward) {
  const auto direct = softmax_channels(forward(g, p, image).output());
  EXPECT_EQ(multi_scale_inference(g, p, image, {1.0}, false).vec(), direct.vec());
}

TEST_F(MultiScale, OutputsLieInSimplex) {
  const auto prob = multi_scale_inference(g, p, image, {0.5, 0.75, 1.0, 1.25}, true);
  EXPECT_EQ(prob.shape(), (Shape{1, 3, 64, 64}));
  for (Index y = 0; y < 64; ++y)
    for (Index x = 0; x < 64; ++x) {
      double s = 0.0;
      for (Index c = 0; c < 3; ++c) {
        EXPECT_GE(prob(0, c, y, x), 0.0);
        s += prob(0, c, y, x);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST_F(MultiScale, MirroredInputGivesMirroredPrediction) {
  const auto a = argmax_channels(multi_scale_inference(g, p, image, {0.75, 1.0}, true));
  const auto b = argmax_channels(multi_scale_inference(g, p, flip_horizontal(image), {0.75, 1.0}, true));
  for (Index y = 0; y < 64; ++y)
    for (Index x = 0; x < 64; ++x) EXPECT_EQ(a.at(0, y, x), b.at(0, y, 63 - x));
}

TEST_F(MultiScale, TwoScalesEqualHandComposedAverage) {
  const auto full = softmax_channels(forward(g, p, image).output());
  const auto small = bilinear_upsample(softmax_channels(forward(g, p, bilinear_upsample(image, 32, 32)).output()), 64, 64);
  const auto got = multi_scale_inference(g, p, image, {0.5, 1.0}, false);
  for (Index i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data()[i], 0.5 * (full.data()[i] + small.data()[i]), 1e-15);
}

TEST_F(MultiScale, RejectsBadScales) {
  EXPECT_THROW(multi_scale_inference(g, p, image, {}, false), std::invalid_argument);
  EXPECT_THROW(multi_scale_inference(g, p, image, {1.0, 0.0}, false), std::invalid_argument);
}

}  // namespace
}  // namespace sunet
