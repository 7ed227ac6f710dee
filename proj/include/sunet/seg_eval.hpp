#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "sunet/executor.hpp"
#include "sunet/train.hpp"

namespace sunet {

/// K×K pixel counts; entry (t, p) counts pixels of true class t predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes, std::int32_t ignore_index = kDefaultIgnoreIndex);

  int classes() const { return k_; }
  std::int32_t ignore_index() const { return ignore_; }
  std::int64_t at(int t, int p) const { return counts_[static_cast<std::size_t>(t * k_ + p)]; }
  std::int64_t& at(int t, int p) { return counts_[static_cast<std::size_t>(t * k_ + p)]; }
  std::int64_t total() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int k_;
  std::int32_t ignore_;
  std::vector<std::int64_t> counts_;
};

/// Adds every pixel whose true label is not the ignore index. Out-of-range
/// labels in either map throw std::out_of_range.
void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth);

struct IoUReport {
  double miou = 0.0;
  std::vector<double> iou;    // NaN for excluded classes
  std::vector<int> excluded;  // classes with an empty union
};

/// IoU_k = cm[k,k] / (row_k + col_k − cm[k,k]), averaged over classes with a
/// non-empty union. Throws std::domain_error when every union is empty.
IoUReport miou(const ConfusionMatrix& cm);

void write_metrics_text(std::ostream& os, const IoUReport& r);
void write_metrics_csv(std::ostream& os, const IoUReport& r);

/// Class probabilities (1, K, H, W) averaged over the given input scales and,
/// with `flip`, their mirrored copies. Each pass resizes the image bilinearly,
/// runs the network in eval mode, applies a channel softmax and resizes the
/// probabilities back to H × W. A single unit scale without flip is the plain
/// softmax of a forward pass.
template <typename Scalar>
Tensor<Scalar> multi_scale_inference(const NetworkGraph& g, const ParamStore<Scalar>& params, const Tensor<Scalar>& image,
                                     const std::vector<double>& scales, bool flip);

/// Confusion matrix of multi_scale_inference argmax predictions over a
/// dataset. Predictions are appended to `predictions` when given.
template <typename Scalar>
ConfusionMatrix evaluate_dataset(const NetworkGraph& g, const ParamStore<Scalar>& params,
                                 const std::vector<Sample<Scalar>>& data, int classes, const std::vector<double>& scales,
                                 bool flip, std::int32_t ignore_index = kDefaultIgnoreIndex,
                                 std::vector<LabelMap>* predictions = nullptr);

}  // namespace sunet
