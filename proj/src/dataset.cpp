#include "sunet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "sunet/rng.hpp"
#include "sunet/tensor_io.hpp"

namespace sunet {

using nlohmann::json;

void DatasetManifest::validate(bool check_labels) const {
  if (num_classes < 2) throw std::invalid_argument("manifest: num_classes must be at least 2");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string tag = "entry " + std::to_string(i) + " ('" + entries[i].image + "')";
    if (!std::filesystem::is_regular_file(image_path(i))) throw IoError(tag + ": missing image " + image_path(i).string());
    if (!std::filesystem::is_regular_file(mask_path(i))) throw IoError(tag + ": missing mask " + mask_path(i).string());
    const Raster a = pnm_header(image_path(i));
    const Raster b = pnm_header(mask_path(i));
    if (b.channels != 1) throw std::invalid_argument(tag + ": mask is not single-channel");
    if (a.height != b.height || a.width != b.width) {
      throw std::invalid_argument(tag + ": image is " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                                  " but mask is " + std::to_string(b.height) + "x" + std::to_string(b.width));
    }
    if (check_labels) {
      for (std::uint8_t v : load_pnm(mask_path(i)).data) {
        if (v >= num_classes && v != ignore_index) {
          throw std::invalid_argument(tag + ": mask label " + std::to_string(v) + " out of range");
        }
      }
    }
  }
}

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["root"] = m.root.generic_string();
  j["num_classes"] = m.num_classes;
  j["ignore_index"] = m.ignore_index;
  j["split"] = m.split;
  j["entries"] = json::array();
  for (const auto& e : m.entries) j["entries"].push_back({{"image", e.image}, {"mask", e.mask}});
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text, const std::filesystem::path& base) {
  try {
    const json j = json::parse(text);
    DatasetManifest m;
    const std::filesystem::path root = j.value("root", std::string("."));
    m.root = root.is_absolute() ? root : base / root;
    m.num_classes = j.at("num_classes").get<int>();
    m.ignore_index = j.value("ignore_index", kDefaultIgnoreIndex);
    m.split = j.value("split", std::string("train"));
    for (const auto& e : j.at("entries")) m.entries.push_back({e.at("image").get<std::string>(), e.at("mask").get<std::string>()});
    return m;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("manifest: ") + e.what());
  }
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << manifest_to_json(m);
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open manifest '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return manifest_from_json(ss.str(), path.parent_path());
}

template <typename Scalar>
std::vector<Sample<Scalar>> load_samples(const DatasetManifest& m) {
  m.validate();
  std::vector<Sample<Scalar>> out;
  out.reserve(m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    out.push_back({raster_to_tensor<Scalar>(load_pnm(m.image_path(i))), raster_to_labels(load_pnm(m.mask_path(i)))});
  }
  return out;
}

std::vector<std::int64_t> mask_histogram(const DatasetManifest& m) {
  std::vector<std::int64_t> h(256, 0);
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    for (std::uint8_t v : load_pnm(m.mask_path(i)).data) ++h[v];
  return h;
}

// ---- synthetic shapes ---------------------------------------------------------

void SyntheticSpec::validate() const {
  if (num_classes < 2 || num_classes > 255) throw std::invalid_argument("synthetic: num_classes must lie in [2, 255]");
  if (!rectangles && !disks) throw std::invalid_argument("synthetic: no shape kinds enabled");
  if (min_shapes < 0 || max_shapes < min_shapes) throw std::invalid_argument("synthetic: bad shape-count range");
  if (min_extent < 1 || max_extent < min_extent || max_extent > std::min(height, width)) {
    throw std::invalid_argument("synthetic: shape extent range must fit the canvas");
  }
  if (!(noise >= 0.0)) throw std::invalid_argument("synthetic: noise must be non-negative");
}

namespace {

// Evenly spaced hues at high saturation; the background is drawn grey.
std::array<double, 3> class_colour(int c, int k) {
  const double hue = 6.0 * static_cast<double>(c - 1) / static_cast<double>(k - 1);
  const double x = 1.0 - std::abs(std::fmod(hue, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hue) % 6) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (double& v : rgb) v = 40.0 + 180.0 * v;
  return rgb;
}

std::uint8_t clamp8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

SyntheticImage synthesize(const SyntheticSpec& spec, std::uint64_t index) {
  spec.validate();
  auto rng = stream({spec.seed, 0x5a11ULL, index});
  auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto pick = [&rng](Index a, Index b) { return std::uniform_int_distribution<Index>(a, b)(rng); };

  const Index H = spec.height, W = spec.width;
  std::vector<double> rgb(static_cast<std::size_t>(H * W * 3));
  Raster mask(1, H, W, 0);

  // Background: a grey linear ramp.
  const double g0 = uni(70, 150), gy = uni(-30, 30), gx = uni(-30, 30);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const double v = g0 + gy * y / H + gx * x / W;
      for (int c = 0; c < 3; ++c) rgb[static_cast<std::size_t>((y * W + x) * 3 + c)] = v;
    }

  const int shapes = static_cast<int>(pick(spec.min_shapes, spec.max_shapes));
  for (int s = 0; s < shapes; ++s) {
    const int cls = static_cast<int>(pick(1, spec.num_classes - 1));
    const bool disk = spec.disks && (!spec.rectangles || uni(0, 1) < 0.5);
    auto colour = class_colour(cls, spec.num_classes);
    for (double& v : colour) v += uni(-15, 15);
    auto paint = [&](Index y, Index x) {
      mask.at(y, x) = static_cast<std::uint8_t>(cls);
      for (int c = 0; c < 3; ++c) rgb[static_cast<std::size_t>((y * W + x) * 3 + c)] = colour[static_cast<std::size_t>(c)];
    };
    if (disk) {
      const Index d = pick(spec.min_extent, spec.max_extent);
      const Index y0 = pick(0, H - d), x0 = pick(0, W - d);
      const double r = d / 2.0, cy = y0 + r - 0.5, cx = x0 + r - 0.5;
      for (Index y = y0; y < y0 + d; ++y)
        for (Index x = x0; x < x0 + d; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) paint(y, x);
    } else {
      const Index h = pick(spec.min_extent, spec.max_extent), w = pick(spec.min_extent, spec.max_extent);
      const Index y0 = pick(0, H - h), x0 = pick(0, W - w);
      for (Index y = y0; y < y0 + h; ++y)
        for (Index x = x0; x < x0 + w; ++x) paint(y, x);
    }
  }

  SyntheticImage out{Raster(3, H, W), std::move(mask), std::vector<std::int64_t>(static_cast<std::size_t>(spec.num_classes), 0)};
  std::normal_distribution<double> normal(0.0, spec.noise * 255.0);
  for (std::size_t i = 0; i < rgb.size(); ++i) out.image.data[i] = clamp8(rgb[i] + (spec.noise > 0 ? normal(rng) : 0.0));
  for (std::uint8_t v : out.mask.data) ++out.histogram[v];
  return out;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, int count, const std::filesystem::path& out_dir,
                                   const std::string& split, std::uint64_t first) {
  spec.validate();
  if (count < 0) throw std::invalid_argument("synthetic: count must be non-negative");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  DatasetManifest m;
  m.root = ".";
  m.num_classes = spec.num_classes;
  m.split = split;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t idx = first + static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof name, "%05llu", static_cast<unsigned long long>(idx));
    const auto img = synthesize(spec, idx);
    const ManifestEntry e{std::string("img_") + name + ".ppm", std::string("mask_") + name + ".pgm"};
    save_pnm(out_dir / e.image, img.image);
    save_pnm(out_dir / e.mask, img.mask);
    m.entries.push_back(e);
  }
  save_manifest(out_dir / "manifest.json", m);
  m.root = out_dir;
  return m;
}

template std::vector<Sample<float>> load_samples(const DatasetManifest&);
template std::vector<Sample<double>> load_samples(const DatasetManifest&);

}  // namespace sunet
