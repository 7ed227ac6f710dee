#include <gtest/gtest.h>

#include <random>

#include "sunet/analysis.hpp"
#include "sunet/arch.hpp"
#include "sunet/dilation.hpp"

namespace sunet {
namespace {

SUNetConfig toy() {
  SUNetConfig c;
  c.name = "toy";
  c.stem_channels = 16;
  c.stem_out = 16;
  c.blocks = {{{1, 8, 16, false}, {1, 8, 24, false}, {1, 8, 32, false}, {1, 8, 40, true}}};
  c.num_classes = 4;
  return c;
}

SegmentationConfig seg(int os, bool multigrid = true, bool degrid = false) {
  SegmentationConfig s;
  s.output_stride = os;
  s.multigrid = multigrid;
  s.degridding = degrid;
  s.num_classes = 3;
  return s;
}

template <typename S>
ParamStore<S> random_params(const NetworkGraph& g, std::uint64_t seed) {
  auto p = init_params<S>(g, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5), v(-0.3, 0.3);
  for (auto& [name, st] : p.bn) {
    for (Index c = 0; c < st.channels(); ++c) {
      st.gamma[c] = static_cast<S>(u(rng));
      st.beta[c] = static_cast<S>(v(rng));
      st.running_mean[c] = static_cast<S>(v(rng));
      st.running_var[c] = static_cast<S>(u(rng));
    }
  }
  return p;
}

template <typename S>
Tensor<S> random_image(Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<S> x({1, 3, h, w});
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<S>(u(rng));
  return x;
}

TEST(ToSegmentation, OutputStrideSixteenLogitSize) {
  const auto g = build_classifier(toy(), 128, 128);
  const auto s = to_segmentation(g, seg(16));
  const auto shapes = infer_shapes(s, {1, 3, 512, 512});
  EXPECT_EQ(shapes[static_cast<std::size_t>(s.find("seg/classifier/conv"))].h, 32);
  EXPECT_EQ(shapes.back(), (Shape{1, 3, 512, 512}));
}

TEST(ToSegmentation, OutputStrideThirtyTwoOnPreset) {
  const auto g = build_classifier(preset("sunet7_128"), 224, 224);
  const auto s = to_segmentation(g, seg(32));
  const auto shapes = infer_shapes(s, {1, 3, 512, 512});
  EXPECT_EQ(shapes[static_cast<std::size_t>(s.find("seg/classifier/conv"))].h, 16);
}

TEST(ToSegmentation, OutputStrideEightDegridding) {
  const auto s = to_segmentation(build_classifier(preset("sunet7_128"), 224, 224), seg(8, true, true));
  EXPECT_EQ(s.node(s.find("block4/m0/E1a/conv")).conv.dilation.h, 4);
  EXPECT_EQ(s.node(s.find("seg/degrid1/conv")).conv.dilation.h, 2);
  EXPECT_EQ(s.node(s.find("seg/degrid2/conv")).conv.dilation.h, 1);
  EXPECT_EQ(s.node(s.find("seg/degrid1/conv")).conv.out_channels, 512);
  EXPECT_EQ(s.node(s.find("transition4/pool")).pool.dilation.h, 2);
  EXPECT_EQ(s.node(s.find("transition3/pool")).pool.stride.h, 1);
}

TEST(ToSegmentation, ThirtyTwoIsClassifierMinusHeadPlusClassifier) {
  const auto g = build_classifier(toy(), 64, 64);
  const auto s = to_segmentation(g, seg(32));
  const int feat = g.find(kFeatureNode);
  ASSERT_EQ(s.find(kFeatureNode), feat);
  const auto cp = count_params(g);
  const auto sp = count_params(s);
  for (int i = 0; i <= feat; ++i) {
    EXPECT_EQ(s.node(i).name, g.node(i).name);
    EXPECT_EQ(s.node(i).conv, g.node(i).conv);
    EXPECT_EQ(sp[static_cast<std::size_t>(i)], cp[static_cast<std::size_t>(i)]);
  }
  EXPECT_EQ(s.size(), feat + 3);
}

TEST(ToSegmentation, BackboneParametersUnchanged) {
  const auto g = build_classifier(toy(), 64, 64);
  const auto fc = count_params(g).back();
  for (int os : {8, 16, 32}) {
    const auto s = to_segmentation(g, seg(os));
    const std::int64_t classifier = 40 * 3 + 3;
    EXPECT_EQ(total_params(s), total_params(g) - fc + classifier) << os;
  }
}

TEST(ToSegmentation, Errors) {
  const auto g = build_classifier(toy(), 64, 64);
  EXPECT_THROW(to_segmentation(g, seg(4)), std::invalid_argument);
  EXPECT_THROW(to_segmentation(to_segmentation(g, seg(16)), seg(16)), std::invalid_argument);
  NetworkGraph bare;
  add_input(bare, 3, 8, 8);
  EXPECT_THROW(to_segmentation(bare, seg(16)), std::invalid_argument);
}

TEST(ToSegmentation, ReceptiveFieldsPreserved) {
  const auto g = build_classifier(toy(), 128, 128);
  const auto base = receptive_field(g, infer_shapes(g, {1, 3, 128, 128}));
  for (int os : {16, 8}) {
    const auto s = to_segmentation(g, seg(os));
    const auto conv = receptive_field(s, infer_shapes(s, {1, 3, 128, 128}));
    for (int i = 0; i <= g.find(kFeatureNode); ++i) {
      const int j = s.find(g.node(i).name);
      ASSERT_GE(j, 0);
      EXPECT_EQ(conv[static_cast<std::size_t>(j)].rf, base[static_cast<std::size_t>(i)].rf) << g.node(i).name;
    }
  }
}

TEST(AtrousEquivalence, SixteenMatchesThirtyTwo) {
  const auto g = build_classifier(toy(), 128, 128);
  const auto p = random_params<float>(g, 3);
  const auto x = random_image<float>(129, 129, 5);
  const auto r = atrous_equivalence_check(to_segmentation(g, seg(32)), to_segmentation(g, seg(16)), p, x);
  EXPECT_EQ(r.factor, 2);
  EXPECT_EQ(r.coarse.h, 4);
  EXPECT_LT(r.max_abs_diff, 1e-4);
  EXPECT_GT(r.compared, 0);
}

TEST(AtrousEquivalence, EightMatchesSixteenInDouble) {
  const auto g = build_classifier(toy(), 128, 128);
  const auto p = random_params<double>(g, 7);
  const auto x = random_image<double>(129, 129, 8);
  const auto r = atrous_equivalence_check(to_segmentation(g, seg(16)), to_segmentation(g, seg(8)), p, x);
  EXPECT_EQ(r.factor, 2);
  EXPECT_LT(r.max_abs_diff, 1e-10);
}

TEST(AtrousEquivalence, StridedModulesDiverge) {
  const auto g = build_classifier(toy(), 128, 128);
  const auto p = random_params<float>(g, 3);
  const auto x = random_image<float>(129, 129, 5);
  const auto r = atrous_equivalence_check(to_segmentation(g, seg(32)), to_segmentation(g, seg(16, false)), p, x);
  EXPECT_GT(r.max_abs_diff, 1e-2);
}

TEST(AtrousEquivalence, ZeroWeights) {
  const auto g = build_classifier(toy(), 128, 128);
  const auto p = constant_params<float>(g, 0.0f);
  const auto x = random_image<float>(129, 129, 5);
  EXPECT_EQ(atrous_equivalence_check(to_segmentation(g, seg(32)), to_segmentation(g, seg(16)), p, x).max_abs_diff, 0.0);
}

}  // namespace
}  // namespace sunet
