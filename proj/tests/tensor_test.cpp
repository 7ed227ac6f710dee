#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "sunet/tensor.hpp"
#include "sunet/tensor_io.hpp"

namespace sunet {
namespace {

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120);
  t(1, 2, 3, 4) = 9.f;
  EXPECT_EQ(t.data()[119], 9.f);
  EXPECT_EQ(t.plane(1, 2)(3, 4), 9.f);
  EXPECT_THROW(Tensor<float>(Shape{1, -1, 2, 2}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 2, 2}, VectorX<float>::Zero(3)), ShapeError);
  EXPECT_THROW(t.reshaped({1, 1, 1, 7}), ShapeError);
  EXPECT_EQ(t.reshaped({1, 1, 1, 120})(0, 0, 0, 119), 9.f);
}

TEST(Tensor, GradientBuffer) {
  Tensor<double> t({1, 1, 2, 2}, 3.0);
  EXPECT_FALSE(t.has_grad());
  t.grad()[0] = 1.0;
  EXPECT_TRUE(t.has_grad());
  t.zero_grad();
  EXPECT_EQ(t.grad().sum(), 0.0);
  t.drop_grad();
  EXPECT_FALSE(t.has_grad());
}

TEST(TensorIo, RoundTripBothDtypes) {
  Tensor<double> d({1, 2, 3, 1});
  for (Index i = 0; i < d.size(); ++i) d.data()[i] = 0.1 * static_cast<double>(i) - 0.25;
  std::stringstream ss;
  write_tensor(ss, d);
  write_tensor(ss, d.cast<float>());
  const auto back = read_tensor<double>(ss);
  EXPECT_EQ(back.shape(), d.shape());
  EXPECT_EQ(back.vec(), d.vec());
  const auto any = read_any_tensor(ss);
  ASSERT_TRUE(std::holds_alternative<Tensor<float>>(any));
  EXPECT_EQ(std::get<Tensor<float>>(any).vec(), d.cast<float>().vec());
}

TEST(TensorIo, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "sunet_tensor_test.sutn";
  Tensor<float> t({2, 1, 2, 2}, 1.5f);
  save_tensor(path, t);
  EXPECT_EQ(load_tensor<float>(path).vec(), t.vec());
  std::filesystem::remove(path);
  EXPECT_THROW(load_tensor<float>(path), IoError);
}

TEST(TensorIo, RejectsBadMagicAndTruncation) {
  std::stringstream bad("XXXX0000");
  EXPECT_THROW(read_any_tensor(bad), FormatError);
  std::stringstream ss;
  write_tensor(ss, Tensor<float>({1, 1, 4, 4}, 2.f));
  std::string s = ss.str();
  s.resize(s.size() - 5);
  std::stringstream cut(s);
  EXPECT_THROW(read_any_tensor(cut), FormatError);
}

TEST(Validation, DefaultOff) {
  EXPECT_FALSE(validation_enabled());
  Tensor<double> t({1, 1, 1, 1}, std::numeric_limits<double>::quiet_NaN());
  EXPECT_NO_THROW(check_finite(t, "x"));
  set_validation(true);
  EXPECT_THROW(check_finite(t, "x"), NumericError);
  set_validation(false);
}

}  // namespace
}  // namespace sunet
