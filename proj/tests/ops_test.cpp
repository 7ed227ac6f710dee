#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sunet/op_catalog.hpp"
#include "sunet/ops.hpp"

namespace sunet {
namespace {

using testing::random_tensor;

// Direct-loop convolution, independent of the im2col path.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const ConvAttrs& a) {
  const Shape& s = x.shape();
  const Index oh = conv_out_size(s.h, a.kernel.h, a.stride.h, a.dilation.h, a.padding.h);
  const Index ow = conv_out_size(s.w, a.kernel.w, a.stride.w, a.dilation.w, a.padding.w);
  Tensor<double> out(Shape{s.n, a.out_channels, oh, ow});
  for (Index n = 0; n < s.n; ++n)
    for (Index o = 0; o < a.out_channels; ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = 0;
          for (Index c = 0; c < s.c; ++c)
            for (Index ki = 0; ki < a.kernel.h; ++ki)
              for (Index kj = 0; kj < a.kernel.w; ++kj) {
                const Index y = i * a.stride.h - a.padding.h + ki * a.dilation.h;
                const Index xx = j * a.stride.w - a.padding.w + kj * a.dilation.w;
                if (y < 0 || y >= s.h || xx < 0 || xx >= s.w) continue;
                acc += w(o, c, ki, kj) * x(n, c, y, xx);
              }
          out(n, o, i, j) = acc;
        }
  return out;
}

Tensor<double> iota(const Shape& s) {
  Tensor<double> t(s);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<double>(i + 1);
  return t;
}

ConvAttrs conv3(Index cin, Index cout, Index s, Index d, Index p) {
  ConvAttrs a;
  a.kernel = {3, 3};
  a.stride = {s, s};
  a.dilation = {d, d};
  a.padding = {p, p};
  a.in_channels = cin;
  a.out_channels = cout;
  return a;
}

TEST(Conv2d, SumOfAllInputs) {
  const auto x = iota({1, 1, 3, 3});
  const Tensor<double> w({1, 1, 3, 3}, 1.0);
  const auto y = conv2d(x, w, nullptr, conv3(1, 1, 1, 1, 0));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.data()[0], 45.0);
}

TEST(Conv2d, DilatedTapsAtEvenRowsAndColumns) {
  const auto x = iota({1, 1, 5, 5});
  const Tensor<double> w({1, 1, 3, 3}, 1.0);
  const auto y = conv2d(x, w, nullptr, conv3(1, 1, 1, 2, 0));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.data()[0], 117.0);
}

TEST(Conv2d, StemOutputSize) { EXPECT_EQ(conv_out_size(224, 7, 2, 1, 3), 112); }

TEST(Conv2d, ShapeFormulaProperty) {
  std::mt19937_64 rng(7);
  for (Index k : {1, 3, 7})
    for (Index s : {1, 2})
      for (Index d : {1, 2, 4})
        for (Index p = 0; p <= 3; ++p)
          for (Index in : {9, 16, 23}) {
            const Index expected = (in + 2 * p - d * (k - 1) - 1) / s + 1;
            if (in + 2 * p - d * (k - 1) - 1 < 0) continue;
            ConvAttrs a;
            a.kernel = {k, k};
            a.stride = {s, s};
            a.dilation = {d, d};
            a.padding = {p, p};
            a.in_channels = 1;
            a.out_channels = 1;
            const auto y = conv2d(random_tensor(rng, {1, 1, in, in}), random_tensor(rng, a.weight_shape(false)),
                                  nullptr, a);
            EXPECT_EQ(y.shape().h, expected) << "k=" << k << " s=" << s << " d=" << d << " p=" << p;
            EXPECT_EQ(y.shape().w, expected);
          }
}

TEST(Conv2d, MatchesDirectLoops) {
  std::mt19937_64 rng(11);
  for (Index s : {1, 2})
    for (Index d : {1, 2}) {
      auto a = conv3(3, 4, s, d, same_padding(3, d));
      const auto x = random_tensor(rng, {2, 3, 9, 8});
      const auto w = random_tensor(rng, a.weight_shape(false));
      const auto got = conv2d(x, w, nullptr, a);
      const auto want = naive_conv(x, w, a);
      ASSERT_EQ(got.shape(), want.shape());
      EXPECT_LT((got.vec() - want.vec()).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Conv2d, RejectsBadInput) {
  const Tensor<double> x({1, 2, 4, 4});
  const Tensor<double> w({1, 3, 3, 3});
  EXPECT_THROW(conv2d(x, w, nullptr, conv3(3, 1, 1, 1, 1)), ShapeError);
  const Tensor<double> x3({1, 3, 2, 2});
  EXPECT_THROW(conv2d(x3, w, nullptr, conv3(3, 1, 1, 2, 0)), ShapeError);
  auto bad = conv3(3, 1, 0, 1, 0);
  EXPECT_THROW(conv2d(x3, w, nullptr, bad), ShapeError);
}

TEST(ConvTranspose, OutputSizes) {
  EXPECT_EQ(conv_transpose_out_size(4, 3, 2, 1, 1, 1), 8);
  EXPECT_EQ(conv_transpose_out_size(2, 3, 2, 1, 1, 1), 4);
  Tensor<double> x({1, 1, 4, 4}, 1.0);
  auto a = conv3(1, 1, 2, 1, 1);
  a.output_padding = {1, 1};
  EXPECT_EQ(conv2d_transpose(x, Tensor<double>({1, 1, 3, 3}, 1.0), nullptr, a).shape(), (Shape{1, 1, 8, 8}));
  a.output_padding = {2, 2};
  EXPECT_THROW(conv2d_transpose(x, Tensor<double>({1, 1, 3, 3}, 1.0), nullptr, a), ShapeError);
}

// ⟨conv2d(x, w), y⟩ = ⟨x, conv2d_transpose(y, w)⟩, both sides by explicit loops
// over the conv2d output and the transposed output.
TEST(ConvTranspose, AdjointOfConv) {
  std::mt19937_64 rng(3);
  for (Index s : {1, 2})
    for (Index d : {1, 2, 3})
      for (Index in : {8, 9}) {
        auto a = conv3(3, 2, s, d, same_padding(3, d));
        const auto x = random_tensor(rng, {2, 3, in, in});
        const auto w = random_tensor(rng, a.weight_shape(false));
        const auto cx = conv2d(x, w, nullptr, a);
        const Index base = conv_transpose_out_size(cx.shape().h, 3, s, d, a.padding.h, 0);
        ConvAttrs t = a;
        std::swap(t.in_channels, t.out_channels);
        t.output_padding = {in - base, in - base};
        const auto y = random_tensor(rng, cx.shape());
        // conv weight (out=2, in=3) is exactly the transposed layout (in=2, out=3).
        const auto ty = conv2d_transpose(y, w, nullptr, t);
        ASSERT_EQ(ty.shape(), x.shape());
        double lhs = 0, rhs = 0;
        for (Index i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * y.data()[i];
        for (Index i = 0; i < x.size(); ++i) rhs += x.data()[i] * ty.data()[i];
        EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs))) << "s=" << s << " d=" << d << " in=" << in;
      }
}

// conv(x; s=1, d=s·d0) subsampled by s equals conv(subsample(x, s); s=1, d=d0)
// wherever neither side touches padding.
TEST(Conv2d, DilationStrideComposition) {
  std::mt19937_64 rng(5);
  for (Index s : {2, 3})
    for (Index d0 : {1, 2}) {
      const auto x = random_tensor(rng, {1, 2, 30, 30});
      auto dense = conv3(2, 2, 1, s * d0, 0);
      auto coarse = conv3(2, 2, 1, d0, 0);
      const auto w = random_tensor(rng, dense.weight_shape(false));
      const auto lhs = subsample(conv2d(x, w, nullptr, dense), s);
      const auto rhs = conv2d(subsample(x, s), w, nullptr, coarse);
      const Index h = std::min(lhs.shape().h, rhs.shape().h);
      ASSERT_GT(h, 0);
      for (Index c = 0; c < 2; ++c)
        for (Index i = 0; i < h; ++i)
          for (Index j = 0; j < h; ++j) EXPECT_NEAR(lhs(0, c, i, j), rhs(0, c, i, j), 1e-12);
    }
}

TEST(BatchNorm, EvalIdentity) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor(rng, {2, 3, 4, 4});
  auto st = BNState<double>::identity(3);
  st.eps = 1e-300;
  st.mode = BNMode::Eval;
  const auto y = batchnorm(x, st);
  EXPECT_LT((y.vec() - x.vec()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  Tensor<double> x({2, 2, 3, 3}, 4.25);
  auto st = BNState<double>::identity(2);
  st.beta << 0.5, -1.5;
  const auto y = batchnorm(x, st);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 9; ++i) {
      EXPECT_DOUBLE_EQ(y.data()[y.offset(n, 0, 0, 0) + i], 0.5);
      EXPECT_DOUBLE_EQ(y.data()[y.offset(n, 1, 0, 0) + i], -1.5);
    }
}

TEST(BatchNorm, RunningMeanDecay) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor(rng, {3, 1, 4, 4}, 1.0, 3.0);
  auto st = BNState<double>::identity(1);
  batchnorm(x, st);
  EXPECT_NEAR(st.running_mean[0], 0.01 * x.vec().mean(), 1e-15);
}

TEST(BatchNorm, Errors) {
  auto st = BNState<double>::identity(2);
  EXPECT_THROW(batchnorm(Tensor<double>({0, 2, 3, 3}), st), ShapeError);
  EXPECT_THROW(batchnorm(Tensor<double>({1, 3, 3, 3}), st), ShapeError);
  st.decay = 1.0;
  EXPECT_THROW(batchnorm(Tensor<double>({1, 2, 3, 3}), st), std::invalid_argument);
}

TEST(Pooling, TransitionHalvesExtent) {
  const auto y = avg_pool2d(Tensor<double>({1, 2, 56, 56}, 1.0), AvgPoolAttrs{});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 28, 28}));
}

TEST(Pooling, DilatedWindowWithEndPadKeepsExtent) {
  const auto x = iota({1, 1, 6, 6});
  AvgPoolAttrs a;
  a.stride = {1, 1};
  a.dilation = {2, 2};
  a.pad_end = {2, 2};
  const auto y = avg_pool2d(x, a);
  ASSERT_EQ(y.shape(), x.shape());
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), (x(0, 0, 0, 0) + x(0, 0, 0, 2) + x(0, 0, 2, 0) + x(0, 0, 2, 2)) / 4);
  EXPECT_DOUBLE_EQ(y(0, 0, 5, 5), x(0, 0, 5, 5));
}

TEST(Pooling, GlobalMean) {
  EXPECT_DOUBLE_EQ(global_avg_pool(iota({1, 1, 7, 7})).data()[0], 25.0);
}

TEST(Bilinear, ConstantPreserved) {
  const auto y = bilinear_upsample(Tensor<double>({1, 2, 4, 4}, 7.0), 64, 64);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 64, 64}));
  EXPECT_TRUE((y.vec().array() == 7.0).all());
}

TEST(Bilinear, SameSizeIsIdentity) {
  std::mt19937_64 rng(9);
  const auto x = random_tensor(rng, {1, 2, 5, 7});
  EXPECT_EQ(bilinear_upsample(x, 5, 7).vec(), x.vec());
}

TEST(CrossEntropy, UniformLogits) {
  const Tensor<double> logits({1, 21, 2, 3}, 0.3);
  const LabelMap labels(1, 2, 3, 4);
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).loss, std::log(21.0), 1e-12);
  EXPECT_NEAR(std::log(21.0), 3.0445, 1e-4);
}

TEST(CrossEntropy, LargeMarginTendsToZero) {
  Tensor<double> logits({1, 3, 2, 2}, 0.0);
  LabelMap labels(1, 2, 2, 1);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) logits(0, 1, i, j) = 50.0;
  EXPECT_LT(softmax_cross_entropy(logits, labels).loss, 1e-20);
}

TEST(CrossEntropy, MatchesPerPixelRecomputation) {
  std::mt19937_64 rng(21);
  const auto logits = random_tensor(rng, {2, 3, 4, 4}, -3.0, 3.0);
  LabelMap labels(2, 4, 4);
  std::uniform_int_distribution<int> cls(0, 2);
  for (auto& v : labels.data) v = cls(rng);
  labels.at(0, 1, 1) = kDefaultIgnoreIndex;
  labels.at(1, 3, 0) = kDefaultIgnoreIndex;

  double total = 0;
  int counted = 0;
  for (Index n = 0; n < 2; ++n)
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 4; ++x) {
        const int t = labels.at(n, y, x);
        if (t == kDefaultIgnoreIndex) continue;
        double z = 0;
        for (Index c = 0; c < 3; ++c) z += std::exp(logits(n, c, y, x));
        total += -std::log(std::exp(logits(n, t, y, x)) / z);
        ++counted;
      }
  const auto r = softmax_cross_entropy(logits, labels);
  EXPECT_EQ(r.counted, counted);
  EXPECT_NEAR(r.loss, total / counted, 1e-12);
  for (Index c = 0; c < 3; ++c) {
    EXPECT_EQ(r.grad(0, c, 1, 1), 0.0);
    EXPECT_EQ(r.grad(1, c, 3, 0), 0.0);
  }
}

TEST(CrossEntropy, AllIgnored) {
  const LabelMap labels(1, 2, 2, kDefaultIgnoreIndex);
  const auto r = softmax_cross_entropy(Tensor<double>({1, 3, 2, 2}, 1.0), labels);
  EXPECT_TRUE(r.all_ignored);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.grad.vec().cwiseAbs().maxCoeff(), 0.0);
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  const LabelMap labels(1, 1, 1, 5);
  EXPECT_THROW(softmax_cross_entropy(Tensor<double>({1, 3, 1, 1}), labels), std::out_of_range);
}

TEST(Gradcheck, ConvStrideTwoDilationTwo) {
  std::mt19937_64 rng(31);
  auto a = conv3(2, 2, 2, 2, 2);
  const auto r = gradcheck(testing::conv_op(a), {random_tensor(rng, {1, 2, 5, 5}), random_tensor(rng, a.weight_shape(false))},
                           1e-4);
  EXPECT_TRUE(r.passed) << r.worst;
}

TEST(Gradcheck, BatchNormTrain) {
  std::mt19937_64 rng(32);
  const auto r = gradcheck(testing::batchnorm_op(BNMode::Train),
                           {random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5),
                            random_tensor(rng, {1, 3, 1, 1})},
                           1e-4);
  EXPECT_TRUE(r.passed) << r.worst;
}

TEST(Gradcheck, ReluAwayFromKink) {
  const auto cases = testing::gradcheck_cases(0);
  for (const auto& c : cases) {
    if (c.op.name != "relu") continue;
    const auto r = gradcheck(c.op, c.inputs, 1e-6);
    EXPECT_TRUE(r.passed) << r.worst;
  }
}

TEST(Gradcheck, EveryOperatorSeveralInstances) {
  for (int instance = 0; instance < 5; ++instance) {
    for (const auto& c : testing::gradcheck_cases(instance)) {
      const auto r = gradcheck(c.op, c.inputs, 1e-4);
      EXPECT_TRUE(r.passed) << c.op.name << " instance " << instance << ": " << r.worst;
    }
  }
}

TEST(Determinism, RepeatedConvIsBitIdentical) {
  std::mt19937_64 rng(41);
  auto a = conv3(4, 5, 2, 1, 1);
  const auto x = random_tensor(rng, {2, 4, 11, 11}).cast<float>();
  const auto w = random_tensor(rng, a.weight_shape(false)).cast<float>();
  EXPECT_EQ(conv2d(x, w, nullptr, a).vec(), conv2d(x, w, nullptr, a).vec());
}

TEST(Validation, SwitchSurfacesNonFinite) {
  Tensor<double> x({1, 1, 2, 2}, 1.0);
  x.data()[2] = std::numeric_limits<double>::infinity();
  EXPECT_NO_THROW(relu(x));
  set_validation(true);
  EXPECT_THROW(relu(x), NumericError);
  set_validation(false);
}

TEST(PhaseMask, KeepsGridPoints) {
  const auto y = phase_mask(iota({1, 1, 5, 5}), 2);
  EXPECT_EQ(y(0, 0, 0, 0), 1.0);
  EXPECT_EQ(y(0, 0, 0, 1), 0.0);
  EXPECT_EQ(y(0, 0, 2, 4), 15.0);
  EXPECT_EQ(y(0, 0, 3, 2), 0.0);
}

}  // namespace
}  // namespace sunet
