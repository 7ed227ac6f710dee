#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace sunet {

using Index = Eigen::Index;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-system failures (missing files, unwritable paths).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// (batch, channel, height, width).
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index numel() const { return n * c * h * w; }
  Index plane() const { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Height/width pair used for kernels, strides, dilations and paddings.
struct Pair {
  Index h = 1;
  Index w = 1;
  friend bool operator==(const Pair&, const Pair&) = default;
};

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>,
                "tensors hold float or double");
  return std::is_same_v<Scalar, float> ? DType::Float32 : DType::Float64;
}

// NaN/Inf checking after every op. Off by default.
void set_validation(bool on);
bool validation_enabled();

/// Dense NCHW tensor with an optional gradient buffer of identical shape.
template <typename Scalar>
class Tensor {
 public:
  using Vector = VectorX<Scalar>;
  using PlaneMap = Eigen::Map<RowMatrixX<Scalar>>;
  using ConstPlaneMap = Eigen::Map<const RowMatrixX<Scalar>>;

  Tensor() = default;
  explicit Tensor(const Shape& s) : shape_(checked(s)), data_(Vector::Zero(s.numel())) {}
  Tensor(const Shape& s, Scalar fill) : shape_(checked(s)), data_(Vector::Constant(s.numel(), fill)) {}
  Tensor(const Shape& s, Vector data) : shape_(checked(s)), data_(std::move(data)) {
    if (data_.size() != s.numel()) {
      throw ShapeError("tensor buffer length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(s));
    }
  }

  static Tensor Zero(const Shape& s) { return Tensor(s); }
  static Tensor Constant(const Shape& s, Scalar v) { return Tensor(s, v); }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  /// Row-major h×w view of one channel plane.
  PlaneMap plane(Index n, Index c) { return PlaneMap(data() + offset(n, c, 0, 0), shape_.h, shape_.w); }
  ConstPlaneMap plane(Index n, Index c) const {
    return ConstPlaneMap(data() + offset(n, c, 0, 0), shape_.h, shape_.w);
  }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(data_.size());
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() { grad().setZero(); }
  void drop_grad() { grad_.reset(); }

  /// Same buffer, different shape of equal element count.
  Tensor reshaped(const Shape& s) const {
    if (s.numel() != shape_.numel()) throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(s));
    return Tensor(s, data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  static const Shape& checked(const Shape& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw ShapeError("negative extent in " + to_string(s));
    return s;
  }

  Shape shape_;
  Vector data_;
  std::optional<Vector> grad_;
};

/// Throws NumericError naming `op` when validation is on and `t` holds NaN/Inf.
template <typename Scalar>
void check_finite(const Tensor<Scalar>& t, const char* op) {
  if (validation_enabled() && !t.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in output " + to_string(t.shape()));
  }
}

}  // namespace sunet
