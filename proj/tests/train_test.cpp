#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "sunet/arch.hpp"
#include "sunet/dilation.hpp"
#include "sunet/tensor_io.hpp"
#include "sunet/train.hpp"

namespace sunet {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sunet_train_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

LRSchedule cosine(std::int64_t max_iters) {
  LRSchedule s;
  s.kind = ScheduleKind::Cosine;
  s.max_iters = max_iters;
  return s;
}

TEST(Schedule, CosineEndpointsAndMidpoint) {
  const auto s = cosine(1000);
  EXPECT_EQ(lr_at(s, 0.1, 0), 0.1);
  EXPECT_EQ(lr_at(s, 0.1, 500), 0.05);
  EXPECT_EQ(lr_at(s, 0.1, 1000), 0.0);
}

TEST(Schedule, CosineIsMonotone) {
  const auto s = cosine(777);
  for (std::int64_t i = 1; i <= 777; ++i) EXPECT_LE(lr_at(s, 0.01, i), lr_at(s, 0.01, i - 1));
}

TEST(Schedule, StepDropsByFactor) {
  LRSchedule s;
  s.kind = ScheduleKind::Step;
  s.max_iters = 1000;
  s.iters_per_epoch = 10;
  s.every_epochs = 3;
  s.factor = 0.1;
  EXPECT_EQ(lr_at(s, 1.0, 29), 1.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 1.0, 30), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(s, 1.0, 60), 0.01);
}

TEST(Schedule, RejectsOutOfRange) {
  EXPECT_THROW(lr_at(cosine(10), 0.1, 11), std::out_of_range);
  EXPECT_THROW(lr_at(cosine(10), 0.1, -1), std::out_of_range);
  EXPECT_THROW(lr_at(cosine(0), 0.1, 0), std::invalid_argument);
}

OptimizerConfig sgd(double mu, double wd, bool nesterov = true) {
  OptimizerConfig c;
  c.momentum = mu;
  c.weight_decay = wd;
  c.nesterov = nesterov;
  return c;
}

TEST(Sgd, PlainGradientDescentWithoutMomentum) {
  double theta[3] = {1.0, -2.0, 0.5}, grad[3] = {0.3, 0.1, -4.0}, v[3] = {0, 0, 0};
  sgd_update(theta, grad, v, 3, sgd(0.0, 0.0), 0.25, 0.0);
  EXPECT_EQ(theta[0], 1.0 - 0.25 * 0.3);
  EXPECT_EQ(theta[1], -2.0 - 0.25 * 0.1);
  EXPECT_EQ(theta[2], 0.5 + 0.25 * 4.0);
}

TEST(Sgd, NesterovHandArithmetic) {
  double theta = 1.0, grad = 1.0, v = 0.0;
  sgd_update(&theta, &grad, &v, 1, sgd(0.9, 0.0), 0.1, 0.0);
  EXPECT_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(theta, 0.81);
}

TEST(Sgd, TenStepsMatchScalarRecurrence) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (bool nesterov : {true, false}) {
    double theta = 0.7, v = 0.0;
    double ref_theta = 0.7, ref_v = 0.0;
    const double mu = 0.95, wd = 1e-3, lr = 0.05;
    for (int step = 0; step < 10; ++step) {
      const double g = n(rng);
      sgd_update(&theta, &g, &v, 1, sgd(mu, wd, nesterov), lr, wd);
      const double gt = g + wd * ref_theta;
      ref_v = mu * ref_v + gt;
      ref_theta = nesterov ? ref_theta - lr * (gt + mu * ref_v) : ref_theta - lr * ref_v;
      ASSERT_EQ(theta, ref_theta) << "step " << step;
      ASSERT_EQ(v, ref_v);
    }
  }
}

NetworkGraph conv_bn_graph() {
  NetworkGraph g;
  int x = add_input(g, 2, 4, 4);
  x = add_conv(g, "c", x, 2, 3, 3, 1, 1, true);
  add_bn(g, "bn", x, 3);
  return g;
}

TEST(Sgd, WeightDecaySkipsBiasAndBatchNorm) {
  const auto g = conv_bn_graph();
  auto p = init_params<double>(g, 3);
  for (Index i = 0; i < 3; ++i) p.tensors.at("c/bias").data()[i] = 0.5;
  p.bn.at("bn").beta.setConstant(0.25);
  const auto before = p;
  Gradients<double> zero;
  for (const auto& [k, t] : p.tensors) zero.tensors.emplace(k, Tensor<double>(t.shape()));
  zero.gamma["bn"] = VectorX<double>::Zero(3);
  zero.beta["bn"] = VectorX<double>::Zero(3);
  OptimizerState<double> st;
  sgd_step(p, zero, st, sgd(0.9, 0.1), 0.5);
  EXPECT_EQ(p.tensors.at("c/bias").vec(), before.tensors.at("c/bias").vec());
  EXPECT_EQ(p.bn.at("bn").gamma, before.bn.at("bn").gamma);
  EXPECT_EQ(p.bn.at("bn").beta, before.bn.at("bn").beta);
  EXPECT_NE(p.tensors.at("c/weight").vec(), before.tensors.at("c/weight").vec());
  const double w0 = before.tensors.at("c/weight").data()[0];
  EXPECT_DOUBLE_EQ(p.tensors.at("c/weight").data()[0], w0 - 0.5 * (0.1 * w0 + 0.9 * 0.1 * w0));
}

Sample<double> random_sample(Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Sample<double> s{Tensor<double>({1, 3, h, w}), LabelMap(1, h, w)};
  for (Index i = 0; i < s.image.size(); ++i) s.image.data()[i] = u(rng);
  for (auto& v : s.mask.data) v = static_cast<std::int32_t>(rng() % 4);
  return s;
}

TEST(Augment, IdentityConfigLeavesPairUnchanged) {
  const auto s = random_sample(12, 9, 1);
  std::mt19937_64 rng(5);
  const auto a = augment(s, AugmentationConfig::identity(12, 9), rng);
  EXPECT_EQ(a.image.vec(), s.image.vec());
  EXPECT_EQ(a.mask, s.mask);
}

TEST(Augment, MirrorTwiceIsIdentity) {
  const auto s = random_sample(8, 11, 2);
  auto cfg = AugmentationConfig::identity(8, 11);
  cfg.hflip_prob = 1.0;
  std::mt19937_64 rng(5);
  const auto once = augment(s, cfg, rng);
  EXPECT_NE(once.image.vec(), s.image.vec());
  EXPECT_EQ(once.mask.at(0, 3, 0), s.mask.at(0, 3, 10));
  const auto twice = augment(once, cfg, rng);
  EXPECT_EQ(twice.image.vec(), s.image.vec());
  EXPECT_EQ(twice.mask, s.mask);
}

TEST(Augment, FixedSeedIsBitIdentical) {
  const auto s = random_sample(40, 40, 3);
  AugmentationConfig cfg;
  cfg.crop_h = cfg.crop_w = 32;
  std::mt19937_64 a(99), b(99);
  const auto x = augment(s, cfg, a);
  const auto y = augment(s, cfg, b);
  EXPECT_EQ(x.image.vec(), y.image.vec());
  EXPECT_EQ(x.mask, y.mask);
  EXPECT_EQ(x.image.shape(), (Shape{1, 3, 32, 32}));
}

TEST(Augment, RotationFillsCornersWithIgnore) {
  auto s = random_sample(31, 31, 4);
  auto cfg = AugmentationConfig::identity(31, 31);
  cfg.rotate_degrees = 10.0;
  std::mt19937_64 rng(1);
  const auto r = augment(s, cfg, rng);
  EXPECT_EQ(r.mask.at(0, 0, 0), kDefaultIgnoreIndex);
  EXPECT_EQ(r.mask.at(0, 30, 30), kDefaultIgnoreIndex);
  EXPECT_NE(r.mask.at(0, 15, 15), kDefaultIgnoreIndex);
  double mean = 0.0;
  for (Index y = 0; y < 31; ++y)
    for (Index x = 0; x < 31; ++x) mean += s.image(0, 1, y, x);
  EXPECT_NEAR(r.image(0, 1, 0, 0), mean / (31 * 31), 1e-12);
}

TEST(Augment, SmallImagesArePaddedToCrop) {
  const auto s = random_sample(6, 6, 5);
  auto cfg = AugmentationConfig::identity(10, 10);
  std::mt19937_64 rng(1);
  const auto r = augment(s, cfg, rng);
  EXPECT_EQ(r.image.shape(), (Shape{1, 3, 10, 10}));
  int ignored = 0;
  for (auto v : r.mask.data) ignored += v == kDefaultIgnoreIndex;
  EXPECT_EQ(ignored, 100 - 36);
}

TEST(Augment, ScaleResizesBothMaps) {
  const auto s = random_sample(20, 20, 6);
  auto cfg = AugmentationConfig::identity(40, 40);
  cfg.scale_min = cfg.scale_max = 2.0;
  std::mt19937_64 rng(1);
  const auto r = augment(s, cfg, rng);
  EXPECT_EQ(r.mask.at(0, 0, 0), s.mask.at(0, 0, 0));
  EXPECT_EQ(r.mask.at(0, 39, 39), s.mask.at(0, 19, 19));
  EXPECT_EQ(r.mask.at(0, 7, 12), s.mask.at(0, 3, 6));
}

TEST(Augment, RejectsMismatchedMask) {
  auto s = random_sample(8, 8, 7);
  s.mask = LabelMap(1, 8, 7);
  std::mt19937_64 rng(1);
  EXPECT_THROW(augment(s, AugmentationConfig::identity(8, 8), rng), std::invalid_argument);
}

SUNetConfig toy() {
  SUNetConfig c;
  c.name = "toy";
  c.stem_channels = 8;
  c.stem_out = 8;
  c.blocks = {{{1, 4, 8, false}, {1, 4, 8, false}, {1, 4, 8, false}, {1, 4, 8, true}}};
  c.num_classes = 4;
  return c;
}

NetworkGraph toy_seg() {
  SegmentationConfig s;
  s.num_classes = 4;
  return to_segmentation(build_classifier(toy(), 32, 32), s);
}

std::string bytes_of(const Checkpoint<float>& c) {
  std::ostringstream os;
  write_checkpoint(os, c);
  return os.str();
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto g = toy_seg();
  std::vector<Sample<float>> data;
  for (int i = 0; i < 2; ++i) {
    const auto s = random_sample(32, 32, 10 + static_cast<std::uint64_t>(i));
    data.push_back({s.image.cast<float>(), s.mask});
  }
  TrainConfig tc;
  tc.iterations = 2;
  tc.schedule = cosine(2);
  tc.optimizer.batch_size = 2;
  tc.augment = false;
  const auto r = train(g, init_params<float>(g, 1), data, tc);
  const std::string a = bytes_of(r.checkpoint);
  std::istringstream is(a);
  const auto back = read_checkpoint<float>(is);
  EXPECT_EQ(bytes_of(back), a);
  EXPECT_EQ(back.iteration, 2);
  EXPECT_FALSE(back.optimizer.velocity.empty());

  const auto dir = scratch("ckpt");
  save_checkpoint(dir / "a.sunc", r.checkpoint);
  EXPECT_NO_THROW(load_checkpoint<float>(dir / "a.sunc", graph_digest(g)));
  EXPECT_THROW(load_checkpoint<float>(dir / "a.sunc", graph_digest(g) ^ 1), FormatError);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.sunc"), IoError);
  std::istringstream bad("SUNX");
  EXPECT_THROW(read_checkpoint<float>(bad), FormatError);
}

TEST(Train, ZeroIterationsReturnsInitialization) {
  const auto g = toy_seg();
  const auto init = init_params<float>(g, 4);
  TrainConfig tc;
  const auto r = train(g, init, std::vector<Sample<float>>{}, tc);
  Checkpoint<float> want;
  want.params = init;
  want.graph_digest = graph_digest(g);
  EXPECT_EQ(bytes_of(r.checkpoint), bytes_of(want));
  EXPECT_TRUE(r.losses.empty());
}

// Two-class pixels separated by the sign of the first feature.
TEST(Train, LinearModelLossDecreasesStrictly) {
  NetworkGraph g;
  const int x = add_input(g, 2, 8, 8);
  add_conv(g, "logits", x, 2, 2, 1, 1, 1, true);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.2, 1.0), v(-1, 1);
  Sample<double> s{Tensor<double>({1, 2, 8, 8}), LabelMap(1, 8, 8)};
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) {
      const int cls = (i * 8 + j) % 2;
      s.image(0, 0, i, j) = cls ? u(rng) : -u(rng);
      s.image(0, 1, i, j) = v(rng);
      s.mask.at(0, i, j) = cls;
    }
  TrainConfig tc;
  tc.iterations = 50;
  tc.schedule = cosine(50);
  tc.optimizer = sgd(0.0, 0.0);
  tc.optimizer.lr0 = 0.5;
  tc.optimizer.batch_size = 1;
  tc.augment = false;
  const auto r = train(g, init_params<double>(g, 2), {s}, tc);
  ASSERT_EQ(r.losses.size(), 50u);
  for (std::size_t i = 1; i < r.losses.size(); ++i) EXPECT_LT(r.losses[i].loss, r.losses[i - 1].loss) << i;
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  const auto g = toy_seg();
  const auto s = random_sample(32, 32, 21);
  TrainConfig tc;
  tc.iterations = 5;
  tc.schedule = cosine(5);
  tc.optimizer.lr0 = 0.0;
  tc.optimizer.batch_size = 1;
  tc.augment = false;
  tc.batchnorm_train = false;
  const auto r = train(g, init_params<double>(g, 3), {s}, tc);
  for (const auto& l : r.losses) EXPECT_EQ(l.loss, r.losses.front().loss);
}

TEST(Train, NonFiniteLossAborts) {
  const auto g = toy_seg();
  auto p = init_params<double>(g, 3);
  p.tensors.at("seg/classifier/conv/weight").data()[0] = std::numeric_limits<double>::infinity();
  TrainConfig tc;
  tc.iterations = 1;
  tc.schedule = cosine(1);
  tc.optimizer.batch_size = 1;
  tc.augment = false;
  EXPECT_THROW(train(g, p, {random_sample(32, 32, 1)}, tc), NumericError);
}

TEST(Train, SameSeedSameCurveAndCheckpoints) {
  const auto g = toy_seg();
  std::vector<Sample<float>> data;
  for (int i = 0; i < 3; ++i) {
    const auto s = random_sample(40, 40, 30 + static_cast<std::uint64_t>(i));
    data.push_back({s.image.cast<float>(), s.mask});
  }
  TrainConfig tc;
  tc.iterations = 4;
  tc.schedule = cosine(4);
  tc.optimizer.batch_size = 2;
  tc.augmentation.crop_h = tc.augmentation.crop_w = 32;
  tc.seed = 17;
  tc.checkpoint_every = 2;
  const fs::path first_dir = scratch("periodic");
  tc.checkpoint_dir = first_dir;
  std::vector<LossRecord> seen;
  const auto a = train(g, init_params<float>(g, 5), data, tc, [&](const LossRecord& r) { seen.push_back(r); });
  tc.checkpoint_dir = scratch("periodic2");
  const auto b = train(g, init_params<float>(g, 5), data, tc);
  ASSERT_EQ(a.losses.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.losses[i].loss, b.losses[i].loss);
    EXPECT_EQ(seen[i].loss, a.losses[i].loss);
  }
  EXPECT_EQ(bytes_of(a.checkpoint), bytes_of(b.checkpoint));
  EXPECT_TRUE(fs::exists(first_dir / "ckpt_2.sunc"));
  EXPECT_TRUE(fs::exists(tc.checkpoint_dir / "ckpt_4.sunc"));
  tc.seed = 18;
  EXPECT_NE(train(g, init_params<float>(g, 5), data, tc).losses.back().loss, a.losses.back().loss);
}

TEST(Train, LossCsvHeader) {
  std::ostringstream os;
  write_loss_csv(os, {{0, 0.5, 1.25}});
  EXPECT_EQ(os.str(), "iter,lr,loss\n0,0.5,1.25\n");
}

}  // namespace
}  // namespace sunet
