#include "sunet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sunet {

namespace le {

void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

namespace {
void read_exact(std::istream& is, char* dst, std::size_t n) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("unexpected end of stream");
}
}  // namespace

std::uint8_t get_u8(std::istream& is) {
  char c;
  read_exact(is, &c, 1);
  return static_cast<std::uint8_t>(c);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string get_string(std::istream& is) {
  const std::uint32_t len = get_u32(is);
  if (len > (1u << 20)) throw FormatError("string length " + std::to_string(len) + " implausible");
  std::string s(len, '\0');
  read_exact(is, s.data(), len);
  return s;
}

}  // namespace le

namespace {

template <typename Scalar>
using Bits = std::conditional_t<std::is_same_v<Scalar, float>, std::uint32_t, std::uint64_t>;

template <typename Scalar>
void write_elements(std::ostream& os, const Tensor<Scalar>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  } else {
    for (Index i = 0; i < t.size(); ++i) {
      const auto bits = std::bit_cast<Bits<Scalar>>(t.data()[i]);
      if constexpr (sizeof(Scalar) == 4) le::put_u32(os, bits); else le::put_u64(os, bits);
    }
  }
}

template <typename Scalar>
Tensor<Scalar> read_elements(std::istream& is, const Shape& shape) {
  Tensor<Scalar> t(shape);
  if constexpr (std::endian::native == std::endian::little) {
    const auto bytes = static_cast<std::streamsize>(t.size() * sizeof(Scalar));
    is.read(reinterpret_cast<char*>(t.data()), bytes);
    if (is.gcount() != bytes) throw FormatError("tensor payload truncated");
  } else {
    for (Index i = 0; i < t.size(); ++i) {
      if constexpr (sizeof(Scalar) == 4) {
        t.data()[i] = std::bit_cast<float>(le::get_u32(is));
      } else {
        t.data()[i] = std::bit_cast<double>(le::get_u64(is));
      }
    }
  }
  return t;
}

}  // namespace

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  os.write(kTensorMagic, 4);
  le::put_u32(os, kTensorFormatVersion);
  le::put_u8(os, static_cast<std::uint8_t>(dtype_of<Scalar>()));
  const Shape& s = t.shape();
  for (Index v : {s.n, s.c, s.h, s.w}) le::put_u64(os, static_cast<std::uint64_t>(v));
  write_elements(os, t);
  if (!os) throw IoError("tensor write failed");
}

AnyTensor read_any_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const std::uint32_t version = le::get_u32(is);
  if (version != kTensorFormatVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const std::uint8_t code = le::get_u8(is);
  Shape s;
  Index* dims[4] = {&s.n, &s.c, &s.h, &s.w};
  for (Index* d : dims) {
    const std::uint64_t v = le::get_u64(is);
    if (v > (1ull << 40)) throw FormatError("tensor extent implausible");
    *d = static_cast<Index>(v);
  }
  if (static_cast<double>(s.n) * static_cast<double>(s.c) * static_cast<double>(s.h) * static_cast<double>(s.w) >
      static_cast<double>(1ull << 34)) {
    throw FormatError("tensor too large");
  }
  switch (static_cast<DType>(code)) {
    case DType::Float32: return read_elements<float>(is, s);
    case DType::Float64: return read_elements<double>(is, s);
  }
  throw FormatError("unknown dtype code " + std::to_string(code));
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  return std::visit(
      [](auto&& t) -> Tensor<Scalar> {
        using Stored = typename std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Stored, Tensor<Scalar>>) {
          return std::move(t);
        } else {
          return t.template cast<Scalar>();
        }
      },
      read_any_tensor(is));
}

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<Scalar>(is);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace sunet
