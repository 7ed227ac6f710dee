#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "sunet/ops.hpp"

namespace sunet {

/// 8-bit raster, interleaved (row, column, channel). One channel is written as
/// binary PGM (P5), three as binary PPM (P6).
struct Raster {
  Index channels = 1;
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> data;

  Raster() = default;
  Raster(Index c, Index h, Index w, std::uint8_t fill = 0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c * h * w), fill) {}

  std::uint8_t& at(Index y, Index x, Index c = 0) {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::uint8_t at(Index y, Index x, Index c = 0) const {
    return data[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  friend bool operator==(const Raster&, const Raster&) = default;
};

void write_pnm(std::ostream& os, const Raster& r);
Raster read_pnm(std::istream& is);
void save_pnm(const std::filesystem::path& path, const Raster& r);
Raster load_pnm(const std::filesystem::path& path);

/// Reads only the header, for size checks.
Raster pnm_header(const std::filesystem::path& path);

/// (1, C, H, W) tensor with values mapped from [0, 255] to [−1, 1].
template <typename Scalar>
Tensor<Scalar> raster_to_tensor(const Raster& r);

/// Every pixel value becomes a class index (255 stays the ignore label).
LabelMap raster_to_labels(const Raster& r);
Raster labels_to_raster(const LabelMap& m, Index batch = 0);

/// Grayscale view of one channel plane, scaled by its largest magnitude so
/// that |x| = max maps to 255. An all-zero plane stays black.
template <typename Scalar>
Raster plane_to_raster(const Tensor<Scalar>& t, Index n, Index c);

}  // namespace sunet
