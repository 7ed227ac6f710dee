#pragma once

#include <cstdint>
#include <type_traits>
#include <vector>

#include "sunet/tensor.hpp"

namespace sunet {

/// Geometry of a (transposed) convolution. Weights are (out, in, kh, kw) for
/// conv2d and (in, out, kh, kw) for conv2d_transpose.
struct ConvAttrs {
  Pair kernel{3, 3};
  Pair stride{1, 1};
  Pair dilation{1, 1};
  Pair padding{0, 0};
  Index in_channels = 0;
  Index out_channels = 0;
  bool bias = false;
  Pair output_padding{0, 0};

  void validate() const;
  Shape weight_shape(bool transposed) const;
  friend bool operator==(const ConvAttrs&, const ConvAttrs&) = default;
};

/// "Same" zero padding d·(k−1)/2 for odd k.
Index same_padding(Index kernel, Index dilation);

/// floor((in + 2p − d·(k−1) − 1)/s) + 1; may be ≤ 0 for invalid geometry.
Index conv_out_size(Index in, Index kernel, Index stride, Index dilation, Index pad);
/// (in − 1)·s − 2p + d·(k−1) + 1 + output_padding.
Index conv_transpose_out_size(Index in, Index kernel, Index stride, Index dilation, Index pad,
                              Index output_padding);

struct AvgPoolAttrs {
  Pair window{2, 2};
  Pair stride{2, 2};
  Pair dilation{1, 1};
  /// Zero padding appended after the last row/column; padded taps are excluded from the mean.
  Pair pad_end{0, 0};

  void validate() const;
};

Index pool_out_size(Index in, Index window, Index stride, Index dilation, Index pad_end);

/// Per-position class indices, (n, h, w) row-major.
struct LabelMap {
  Index n = 0;
  Index h = 0;
  Index w = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(Index n_, Index h_, Index w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

  std::int32_t& at(Index b, Index y, Index x) { return data[static_cast<std::size_t>((b * h + y) * w + x)]; }
  std::int32_t at(Index b, Index y, Index x) const {
    return data[static_cast<std::size_t>((b * h + y) * w + x)];
  }
  Index size() const { return n * h * w; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline constexpr std::int32_t kDefaultIgnoreIndex = 255;

enum class BNMode { Train, Eval };

template <typename Scalar>
struct BNState {
  VectorX<Scalar> gamma;
  VectorX<Scalar> beta;
  VectorX<Scalar> running_mean;
  VectorX<Scalar> running_var;
  Scalar decay = Scalar(0.99);
  Scalar eps = Scalar(1e-5);
  BNMode mode = BNMode::Train;

  static BNState identity(Index channels);
  Index channels() const { return gamma.size(); }
  void validate() const;
};

/// Saved by a train-mode batchnorm forward for its backward.
template <typename Scalar>
struct BNCache {
  VectorX<Scalar> mean;
  VectorX<Scalar> inv_std;
  BNMode mode = BNMode::Train;
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;  // empty unless the op carried a bias
};

template <typename Scalar>
struct BNGrads {
  Tensor<Scalar> input;
  VectorX<Scalar> gamma;
  VectorX<Scalar> beta;
};

template <typename Scalar>
struct CrossEntropyResult {
  double loss = 0.0;
  Tensor<Scalar> grad;  // d loss / d logits
  Index counted = 0;    // non-ignored positions
  bool all_ignored = false;
};

// ---- convolution -----------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias,
                      const ConvAttrs& attrs);
template <typename Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvAttrs& attrs,
                                  const Tensor<Scalar>& grad_out);

template <typename Scalar>
Tensor<Scalar> conv2d_transpose(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias,
                                const ConvAttrs& attrs);
template <typename Scalar>
ConvGrads<Scalar> conv2d_transpose_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                            const ConvAttrs& attrs, const Tensor<Scalar>& grad_out);

// ---- normalization / activation -------------------------------------------

/// Train mode normalizes with batch statistics and folds them into the running
/// averages (running ← decay·running + (1−decay)·batch); eval mode uses the running
/// statistics only.
template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& x, BNState<Scalar>& st, BNCache<Scalar>* cache = nullptr);
template <typename Scalar>
BNGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& x, const BNState<Scalar>& st,
                                   const BNCache<Scalar>& cache, const Tensor<Scalar>& grad_out);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out);

// ---- pooling / resampling ---------------------------------------------------

template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, const AvgPoolAttrs& attrs);
template <typename Scalar>
Tensor<Scalar> avg_pool2d_backward(const Tensor<Scalar>& x, const AvgPoolAttrs& attrs,
                                   const Tensor<Scalar>& grad_out);

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& input_shape, const Tensor<Scalar>& grad_out);

/// Half-pixel-centred bilinear resize (no corner alignment), edge-clamped.
template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, Index out_h, Index out_w);
template <typename Scalar>
Tensor<Scalar> bilinear_upsample_backward(const Shape& input_shape, const Tensor<Scalar>& grad_out);

/// Zeroes every position whose row or column is not a multiple of `period`.
template <typename Scalar>
Tensor<Scalar> phase_mask(const Tensor<Scalar>& x, Index period);

// ---- dense / structural -----------------------------------------------------

/// x (n, c, h, w) flattened to (n, c·h·w); w (out, in, 1, 1); bias (1, out, 1, 1).
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const std::type_identity_t<Tensor<Scalar>>* bias);
template <typename Scalar>
ConvGrads<Scalar> linear_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, bool has_bias,
                                  const Tensor<Scalar>& grad_out);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// Splits a gradient of concat_channels back into its two parts.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> concat_channels_backward(Index channels_a,
                                                                   const Tensor<Scalar>& grad_out);

// ---- loss -------------------------------------------------------------------

/// Mean softmax cross-entropy over non-ignored positions. All positions ignored
/// yields zero loss, zero gradient and `all_ignored` set.
template <typename Scalar>
CrossEntropyResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, const LabelMap& labels,
                                                 std::int32_t ignore_index = kDefaultIgnoreIndex);

/// Channel-wise softmax.
template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits);

/// Per-position argmax over channels.
template <typename Scalar>
LabelMap argmax_channels(const Tensor<Scalar>& scores);

/// Mirror along the width axis.
template <typename Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar>& x);

/// Keeps every `step`-th row and column starting at `phase`.
template <typename Scalar>
Tensor<Scalar> subsample(const Tensor<Scalar>& x, Index step, Index phase = 0);

}  // namespace sunet
