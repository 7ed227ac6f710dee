#include "sunet/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "sunet/tensor_io.hpp"

namespace sunet {

namespace {

Index read_header_int(std::istream& is) {
  int c = is.peek();
  while (is && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else {
      is.get();
    }
    c = is.peek();
  }
  Index v = -1;
  if (!(is >> v) || v < 0) throw FormatError("pnm: malformed header");
  return v;
}

Raster read_header(std::istream& is) {
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw FormatError("pnm: expected binary P5 or P6 magic");
  }
  Raster r;
  r.channels = magic[1] == '6' ? 3 : 1;
  r.width = read_header_int(is);
  r.height = read_header_int(is);
  if (read_header_int(is) != 255) throw FormatError("pnm: only maxval 255 is supported");
  if (!std::isspace(is.get())) throw FormatError("pnm: missing separator after header");
  return r;
}

}  // namespace

void write_pnm(std::ostream& os, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw std::invalid_argument("pnm: raster must have 1 or 3 channels");
  if (static_cast<Index>(r.data.size()) != r.channels * r.height * r.width) {
    throw std::invalid_argument("pnm: raster buffer does not match its size");
  }
  os << (r.channels == 3 ? "P6" : "P5") << '\n' << r.width << ' ' << r.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
}

Raster read_pnm(std::istream& is) {
  Raster r = read_header(is);
  r.data.resize(static_cast<std::size_t>(r.channels * r.height * r.width));
  is.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  if (is.gcount() != static_cast<std::streamsize>(r.data.size())) throw FormatError("pnm: truncated pixel data");
  return r;
}

void save_pnm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_pnm(os, r);
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

Raster load_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read_pnm(is);
}

Raster pnm_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read_header(is);
}

template <typename Scalar>
Tensor<Scalar> raster_to_tensor(const Raster& r) {
  Tensor<Scalar> t({1, r.channels, r.height, r.width});
  for (Index c = 0; c < r.channels; ++c)
    for (Index y = 0; y < r.height; ++y)
      for (Index x = 0; x < r.width; ++x) t(0, c, y, x) = static_cast<Scalar>(r.at(y, x, c) / 127.5 - 1.0);
  return t;
}

LabelMap raster_to_labels(const Raster& r) {
  if (r.channels != 1) throw std::invalid_argument("label raster must be single-channel");
  LabelMap m(1, r.height, r.width);
  std::copy(r.data.begin(), r.data.end(), m.data.begin());
  return m;
}

Raster labels_to_raster(const LabelMap& m, Index batch) {
  Raster r(1, m.h, m.w);
  for (Index y = 0; y < m.h; ++y) {
    for (Index x = 0; x < m.w; ++x) {
      const std::int32_t v = m.at(batch, y, x);
      if (v < 0 || v > 255) throw std::out_of_range("label " + std::to_string(v) + " does not fit in 8 bits");
      r.at(y, x) = static_cast<std::uint8_t>(v);
    }
  }
  return r;
}

template <typename Scalar>
Raster plane_to_raster(const Tensor<Scalar>& t, Index n, Index c) {
  const auto p = t.plane(n, c);
  const double peak = p.size() ? static_cast<double>(p.cwiseAbs().maxCoeff()) : 0.0;
  Raster r(1, t.shape().h, t.shape().w);
  if (peak == 0.0) return r;
  for (Index y = 0; y < r.height; ++y)
    for (Index x = 0; x < r.width; ++x)
      r.at(y, x) = static_cast<std::uint8_t>(std::lround(255.0 * std::abs(static_cast<double>(p(y, x))) / peak));
  return r;
}

template Tensor<float> raster_to_tensor(const Raster&);
template Tensor<double> raster_to_tensor(const Raster&);
template Raster plane_to_raster(const Tensor<float>&, Index, Index);
template Raster plane_to_raster(const Tensor<double>&, Index, Index);

}  // namespace sunet
