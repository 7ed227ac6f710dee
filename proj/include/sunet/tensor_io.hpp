#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "sunet/tensor.hpp"

namespace sunet {

/// Binary tensor container:
///   "SUTN" | u32 version | u8 dtype (1 = f32, 2 = f64) | 4 × u64 shape (n, c, h, w) | raw data
/// All integers and elements little-endian.
inline constexpr char kTensorMagic[4] = {'S', 'U', 'T', 'N'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t);
AnyTensor read_any_tensor(std::istream& is);

/// Reads a tensor and converts it to `Scalar` if the stored dtype differs.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is);

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t);
template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path);

// Little-endian primitives shared by the other binary formats.
namespace le {
void put_u8(std::ostream& os, std::uint8_t v);
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_string(std::ostream& os, const std::string& s);
std::uint8_t get_u8(std::istream& is);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
std::string get_string(std::istream& is);
}  // namespace le

}  // namespace sunet
