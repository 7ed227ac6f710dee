#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sunet/raster.hpp"
#include "sunet/train.hpp"

namespace sunet {

struct ManifestEntry {
  std::string image;  // binary PPM, relative to the manifest root
  std::string mask;   // binary PGM of class indices
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  int num_classes = 2;
  std::int32_t ignore_index = kDefaultIgnoreIndex;
  std::string split = "train";

  std::filesystem::path image_path(std::size_t i) const { return root / entries.at(i).image; }
  std::filesystem::path mask_path(std::size_t i) const { return root / entries.at(i).mask; }

  /// Missing files raise IoError; a size mismatch or a label outside
  /// [0, K) ∪ {ignore} raises std::invalid_argument naming the entry.
  void validate(bool check_labels = false) const;
};

/// JSON with keys root, num_classes, ignore_index, split, entries[{image, mask}].
std::string manifest_to_json(const DatasetManifest& m);
/// A relative root is resolved against `base`.
DatasetManifest manifest_from_json(const std::string& text, const std::filesystem::path& base = {});
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

template <typename Scalar>
std::vector<Sample<Scalar>> load_samples(const DatasetManifest& m);

/// Pixel counts per class value 0..255 over all mask files.
std::vector<std::int64_t> mask_histogram(const DatasetManifest& m);

struct SyntheticSpec {
  Index height = 128;
  Index width = 128;
  bool rectangles = true;
  bool disks = true;
  int min_shapes = 1;
  int max_shapes = 3;
  Index min_extent = 16;  // side length or diameter, pixels
  Index max_extent = 48;
  int num_classes = 3;  // background plus shape classes
  double noise = 0.05;  // Gaussian std as a fraction of full scale
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticImage {
  Raster image;  // 3 channels
  Raster mask;   // class indices
  std::vector<std::int64_t> histogram;  // per class, as drawn
};

/// Image `index` of the stream defined by `spec`; independent of how many
/// other images are generated.
SyntheticImage synthesize(const SyntheticSpec& spec, std::uint64_t index);

/// Writes img_NNNNN.ppm / mask_NNNNN.pgm for indices [first, first + count)
/// and manifest.json into `out_dir`.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, int count, const std::filesystem::path& out_dir,
                                   const std::string& split = "train", std::uint64_t first = 0);

}  // namespace sunet
