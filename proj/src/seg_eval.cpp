#include "sunet/seg_eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace sunet {

ConfusionMatrix::ConfusionMatrix(int classes, std::int32_t ignore_index)
    : k_(classes), ignore_(ignore_index), counts_(static_cast<std::size_t>(classes < 0 ? 0 : classes * classes), 0) {
  if (classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.k_ != k_) throw std::invalid_argument("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  return *this;
}

void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth) {
  if (pred.n != truth.n || pred.h != truth.h || pred.w != truth.w) {
    throw ShapeError("accumulate: prediction and ground truth differ in size");
  }
  const int k = cm.classes();
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    const std::int32_t t = truth.data[i];
    if (t == cm.ignore_index()) continue;
    const std::int32_t p = pred.data[i];
    if (t < 0 || t >= k) throw std::out_of_range("accumulate: true label " + std::to_string(t) + " out of range");
    if (p < 0 || p >= k) throw std::out_of_range("accumulate: predicted label " + std::to_string(p) + " out of range");
    ++cm.at(t, p);
  }
}

IoUReport miou(const ConfusionMatrix& cm) {
  const int k = cm.classes();
  if (k < 2) throw std::invalid_argument("miou needs at least two classes");
  IoUReport r;
  r.iou.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t uni = row + col - cm.at(c, c);
    if (uni == 0) {
      r.excluded.push_back(c);
      continue;
    }
    const double v = static_cast<double>(cm.at(c, c)) / static_cast<double>(uni);
    r.iou[static_cast<std::size_t>(c)] = v;
    sum += v;
    ++used;
  }
  if (used == 0) throw std::domain_error("miou: every class has an empty union");
  r.miou = sum / used;
  return r;
}

void write_metrics_text(std::ostream& os, const IoUReport& r) {
  char buf[64];
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    if (std::isnan(r.iou[c])) {
      std::snprintf(buf, sizeof buf, "class %zu  excluded\n", c);
    } else {
      std::snprintf(buf, sizeof buf, "class %zu  iou %.6f\n", c, r.iou[c]);
    }
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mIoU %.6f\n", r.miou);
  os << buf;
}

void write_metrics_csv(std::ostream& os, const IoUReport& r) {
  os << "class,iou\n";
  char buf[64];
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    if (std::isnan(r.iou[c])) {
      std::snprintf(buf, sizeof buf, "%zu,\n", c);
    } else {
      std::snprintf(buf, sizeof buf, "%zu,%.17g\n", c, r.iou[c]);
    }
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.17g\n", r.miou);
  os << buf;
}

template <typename Scalar>
Tensor<Scalar> multi_scale_inference(const NetworkGraph& g, const ParamStore<Scalar>& params, const Tensor<Scalar>& image,
                                     const std::vector<double>& scales, bool flip) {
  if (scales.empty()) throw std::invalid_argument("multi_scale_inference: no scales");
  for (double s : scales)
    if (!(s > 0.0)) throw std::invalid_argument("multi_scale_inference: scales must be positive");
  const Shape sh = image.shape();
  Tensor<Scalar> sum;
  int passes = 0;
  for (double s : scales) {
    Tensor<Scalar> x = image;
    if (s != 1.0) {
      x = bilinear_upsample(image, std::max<Index>(1, std::lround(sh.h * s)), std::max<Index>(1, std::lround(sh.w * s)));
    }
    for (int mirrored = 0; mirrored < (flip ? 2 : 1); ++mirrored) {
      Tensor<Scalar> in = mirrored ? flip_horizontal(x) : x;
      Tensor<Scalar> p = softmax_channels(forward(g, params, in).output());
      if (mirrored) p = flip_horizontal(p);
      if (p.shape().h != sh.h || p.shape().w != sh.w) p = bilinear_upsample(p, sh.h, sh.w);
      if (sum.empty()) {
        sum = std::move(p);
      } else {
        sum.vec() += p.vec();
      }
      ++passes;
    }
  }
  if (passes > 1) sum.vec() /= static_cast<Scalar>(passes);
  return sum;
}

template <typename Scalar>
ConfusionMatrix evaluate_dataset(const NetworkGraph& g, const ParamStore<Scalar>& params,
                                 const std::vector<Sample<Scalar>>& data, int classes, const std::vector<double>& scales,
                                 bool flip, std::int32_t ignore_index, std::vector<LabelMap>* predictions) {
  ConfusionMatrix cm(classes, ignore_index);
  for (const auto& s : data) {
    LabelMap pred = argmax_channels(multi_scale_inference(g, params, s.image, scales, flip));
    accumulate(cm, pred, s.mask);
    if (predictions) predictions->push_back(std::move(pred));
  }
  return cm;
}

template ConfusionMatrix evaluate_dataset(const NetworkGraph&, const ParamStore<float>&, const std::vector<Sample<float>>&,
                                          int, const std::vector<double>&, bool, std::int32_t, std::vector<LabelMap>*);
template ConfusionMatrix evaluate_dataset(const NetworkGraph&, const ParamStore<double>&,
                                          const std::vector<Sample<double>>&, int, const std::vector<double>&, bool,
                                          std::int32_t, std::vector<LabelMap>*);
template Tensor<float> multi_scale_inference(const NetworkGraph&, const ParamStore<float>&, const Tensor<float>&,
                                             const std::vector<double>&, bool);
template Tensor<double> multi_scale_inference(const NetworkGraph&, const ParamStore<double>&, const Tensor<double>&,
                                              const std::vector<double>&, bool);

}  // namespace sunet
