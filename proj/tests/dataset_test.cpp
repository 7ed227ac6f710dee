#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "sunet/activations.hpp"
#include "sunet/arch.hpp"
#include "sunet/dataset.hpp"
#include "sunet/dilation.hpp"
#include "sunet/tensor_io.hpp"

namespace sunet {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sunet_dataset_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Raster, RoundTripBothKinds) {
  for (Index c : {1, 3}) {
    Raster r(c, 5, 7);
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = static_cast<std::uint8_t>(i * 37);
    std::stringstream ss;
    write_pnm(ss, r);
    EXPECT_EQ(read_pnm(ss), r);
  }
}

TEST(Raster, HeaderCommentsAndErrors) {
  std::istringstream ok("P5\n# comment\n2 1\n255\n\x01\x02");
  const auto r = read_pnm(ok);
  EXPECT_EQ(r.width, 2);
  EXPECT_EQ(r.at(0, 1), 2);
  std::istringstream magic("P3\n1 1\n255\n0 0 0");
  EXPECT_THROW(read_pnm(magic), FormatError);
  std::istringstream shortdata("P6\n2 2\n255\n\x01");
  EXPECT_THROW(read_pnm(shortdata), FormatError);
  std::istringstream depth("P5\n1 1\n65535\n\x01\x01");
  EXPECT_THROW(read_pnm(depth), FormatError);
  EXPECT_THROW(load_pnm("/nonexistent/x.pgm"), IoError);
}

TEST(Raster, TensorAndLabelConversions) {
  Raster r(3, 1, 2);
  r.at(0, 0, 0) = 0;
  r.at(0, 1, 2) = 255;
  const auto t = raster_to_tensor<double>(r);
  EXPECT_EQ(t(0, 0, 0, 0), -1.0);
  EXPECT_EQ(t(0, 2, 0, 1), 1.0);
  LabelMap m(1, 2, 2, 3);
  m.at(0, 1, 1) = kDefaultIgnoreIndex;
  EXPECT_EQ(raster_to_labels(labels_to_raster(m)), m);
  m.at(0, 0, 0) = 300;
  EXPECT_THROW(labels_to_raster(m), std::out_of_range);
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.height = 32;
  s.width = 40;
  s.min_extent = 6;
  s.max_extent = 20;
  s.num_classes = 4;
  s.seed = 12;
  return s;
}

TEST(Synthetic, ZeroCountGivesEmptyManifest) {
  const auto dir = scratch("empty");
  const auto m = generate_synthetic(small_spec(), 0, dir);
  EXPECT_TRUE(m.entries.empty());
  EXPECT_TRUE(load_manifest(dir / "manifest.json").entries.empty());
}

TEST(Synthetic, FixedSeedIsByteIdentical) {
  const auto a = scratch("a"), b = scratch("b");
  generate_synthetic(small_spec(), 4, a);
  generate_synthetic(small_spec(), 4, b);
  int files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path().filename();
    ++files;
  }
  EXPECT_EQ(files, 9);
  auto other = small_spec();
  other.seed = 13;
  const auto c = scratch("c");
  generate_synthetic(other, 1, c);
  EXPECT_NE(slurp(a / "img_00000.ppm"), slurp(c / "img_00000.ppm"));
}

TEST(Synthetic, HistogramMatchesRescan) {
  const auto dir = scratch("hist");
  const auto spec = small_spec();
  const auto m = generate_synthetic(spec, 6, dir);
  std::vector<std::int64_t> drawn(256, 0);
  for (std::uint64_t i = 0; i < 6; ++i) {
    const auto s = synthesize(spec, i);
    for (std::size_t c = 0; c < s.histogram.size(); ++c) drawn[c] += s.histogram[c];
  }
  EXPECT_EQ(mask_histogram(load_manifest(dir / "manifest.json")), drawn);
  std::int64_t total = 0;
  for (auto v : drawn) total += v;
  EXPECT_EQ(total, 6 * 32 * 40);
  for (std::size_t c = 4; c < 256; ++c) EXPECT_EQ(drawn[c], 0);
}

TEST(Synthetic, ImageIndependentOfCount) {
  const auto a = scratch("idx_a"), b = scratch("idx_b");
  generate_synthetic(small_spec(), 3, a);
  generate_synthetic(small_spec(), 1, b, "train", 2);
  EXPECT_EQ(slurp(a / "img_00002.ppm"), slurp(b / "img_00002.ppm"));
}

TEST(Synthetic, RejectsBadSpec) {
  auto s = small_spec();
  s.max_extent = 64;
  EXPECT_THROW(synthesize(s, 0), std::invalid_argument);
  s = small_spec();
  s.num_classes = 1;
  EXPECT_THROW(synthesize(s, 0), std::invalid_argument);
}

TEST(Manifest, ValidationNamesOffendingEntry) {
  const auto dir = scratch("manifest");
  auto m = generate_synthetic(small_spec(), 3, dir);
  EXPECT_NO_THROW(m.validate(true));
  save_pnm(dir / "mask_00001.pgm", Raster(1, 31, 40));
  try {
    m.validate();
    FAIL() << "expected a size mismatch";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("entry 1"), std::string::npos);
  }
  m.entries[1].mask = "nothing.pgm";
  EXPECT_THROW(m.validate(), IoError);
  save_pnm(dir / "mask_00001.pgm", Raster(1, 32, 40, 9));
  m.entries[1].mask = "mask_00001.pgm";
  EXPECT_NO_THROW(m.validate(false));
  EXPECT_THROW(m.validate(true), std::invalid_argument);
}

TEST(Manifest, JsonRoundTripAndLoad) {
  const auto dir = scratch("json");
  const auto m = generate_synthetic(small_spec(), 2, dir, "val");
  const auto back = load_manifest(dir / "manifest.json");
  EXPECT_EQ(back.entries, m.entries);
  EXPECT_EQ(back.split, "val");
  EXPECT_EQ(back.num_classes, 4);
  EXPECT_EQ(manifest_to_json(manifest_from_json(manifest_to_json(back))), manifest_to_json(back));
  const auto samples = load_samples<float>(back);
  ASSERT_EQ(samples.size(), 2u);
  EXPECT_EQ(samples[0].image.shape(), (Shape{1, 3, 32, 40}));
  EXPECT_THROW(manifest_from_json("{\"entries\": []}"), std::invalid_argument);
}

SUNetConfig toy() {
  SUNetConfig c;
  c.name = "toy";
  c.stem_channels = 8;
  c.stem_out = 8;
  c.blocks = {{{1, 4, 8, false}, {1, 4, 12, false}, {1, 4, 16, false}, {1, 4, 20, true}}};
  c.num_classes = 3;
  return c;
}

TEST(Activations, SegmentationPresetHasSixLevels) {
  SegmentationConfig s;
  const auto g = to_segmentation(build_classifier(preset("sunet7_128"), 224, 224), s);
  std::set<int> levels;
  for (const auto& n : g.nodes)
    if (n.level > 0) levels.insert(n.level);
  EXPECT_EQ(levels, (std::set<int>{1, 2, 3, 4, 5, 6}));
}

TEST(Activations, SixLevelsPlusPredictionOnToy) {
  SegmentationConfig s;
  s.num_classes = 3;
  const auto g = to_segmentation(build_classifier(toy(), 64, 64), s);
  const auto p = init_params<double>(g, 2);
  Tensor<double> x({1, 3, 64, 64});
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = std::sin(0.1 * static_cast<double>(i));
  const auto d = dump_activations(g, p, x);
  ASSERT_EQ(d.levels.size(), 6u);
  EXPECT_EQ(d.prediction.h, 64);
  const auto fwd = forward(g, p, x);
  for (const auto& l : d.levels) {
    const auto& t = fwd.values[static_cast<std::size_t>(g.find(l.node))];
    for (Index c = 0; c < t.shape().c; ++c) EXPECT_LE(t.plane(0, c).cwiseAbs().sum(), l.l1 + 1e-12);
    EXPECT_EQ(l.map.vec(), Eigen::Map<const VectorX<double>>(t.data() + t.offset(0, l.channel, 0, 0), t.shape().plane()));
  }
  EXPECT_EQ(d.levels.back().map.shape().h, 4);

  const auto dir = scratch("dumps");
  const auto paths = write_activation_dumps(d, dir);
  EXPECT_EQ(paths.size(), 13u);
  EXPECT_EQ(load_tensor<double>(dir / "level_3.sutn").vec(), d.levels[2].map.vec());
  EXPECT_EQ(raster_to_labels(load_pnm(dir / "prediction.pgm")), d.prediction);
}

TEST(Activations, ZeroWeightsGiveZeroDumps) {
  const auto g = build_classifier(toy(), 64, 64);
  const auto p = constant_params<float>(g, 0.0f);
  const auto d = dump_activations(g, p, Tensor<float>({2, 3, 64, 64}, 1.0f));
  EXPECT_EQ(d.levels.size(), 5u);
  EXPECT_EQ(d.prediction.size(), 0);
  for (const auto& l : d.levels) {
    EXPECT_EQ(l.l1, 0.0);
    EXPECT_EQ(plane_to_raster(l.map, 0, 0), Raster(1, l.map.shape().h, l.map.shape().w));
  }
}

}  // namespace
}  // namespace sunet
