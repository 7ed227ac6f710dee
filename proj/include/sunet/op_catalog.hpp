#pragma once

// Differentiable-operator wrappers and random instances shared by the unit
// tests and the acceptance suite.

#include <random>
#include <string>
#include <vector>

#include "sunet/gradcheck.hpp"
#include "sunet/ops.hpp"

namespace sunet::testing {

inline Tensor<double> random_tensor(std::mt19937_64& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

inline DifferentiableOp conv_op(const ConvAttrs& a) {
  return {"conv2d",
          [a](const TensorList& in) { return conv2d(in[0], in[1], a.bias ? &in[2] : nullptr, a); },
          [a](const TensorList& in, const Tensor<double>& g) {
            auto r = conv2d_backward(in[0], in[1], a, g);
            TensorList out{r.input, r.weight};
            if (a.bias) out.push_back(r.bias);
            return out;
          }};
}

inline DifferentiableOp conv_transpose_op(const ConvAttrs& a) {
  return {"conv2d_transpose",
          [a](const TensorList& in) { return conv2d_transpose(in[0], in[1], a.bias ? &in[2] : nullptr, a); },
          [a](const TensorList& in, const Tensor<double>& g) {
            auto r = conv2d_transpose_backward(in[0], in[1], a, g);
            TensorList out{r.input, r.weight};
            if (a.bias) out.push_back(r.bias);
            return out;
          }};
}

// Inputs: x, gamma (1,C,1,1), beta (1,C,1,1). Running statistics are reset on
// every call so finite differences see a pure function.
inline DifferentiableOp batchnorm_op(BNMode mode) {
  auto state_for = [mode](const TensorList& in) {
    BNState<double> st = BNState<double>::identity(in[0].shape().c);
    st.gamma = in[1].vec();
    st.beta = in[2].vec();
    st.running_mean.setConstant(0.1);
    st.running_var.setConstant(1.7);
    st.mode = mode;
    return st;
  };
  return {mode == BNMode::Train ? "batchnorm(train)" : "batchnorm(eval)",
          [state_for](const TensorList& in) {
            auto st = state_for(in);
            return batchnorm(in[0], st);
          },
          [state_for](const TensorList& in, const Tensor<double>& g) {
            auto st = state_for(in);
            BNCache<double> cache;
            batchnorm(in[0], st, &cache);
            auto st_fresh = state_for(in);
            auto r = batchnorm_backward(in[0], st_fresh, cache, g);
            const Shape ps{1, in[0].shape().c, 1, 1};
            return TensorList{r.input, Tensor<double>(ps, r.gamma), Tensor<double>(ps, r.beta)};
          }};
}

inline DifferentiableOp relu_op() {
  return {"relu", [](const TensorList& in) { return relu(in[0]); },
          [](const TensorList& in, const Tensor<double>& g) { return TensorList{relu_backward(in[0], g)}; }};
}

inline DifferentiableOp avg_pool_op(const AvgPoolAttrs& a) {
  return {"avg_pool2d", [a](const TensorList& in) { return avg_pool2d(in[0], a); },
          [a](const TensorList& in, const Tensor<double>& g) {
            return TensorList{avg_pool2d_backward(in[0], a, g)};
          }};
}

inline DifferentiableOp global_pool_op() {
  return {"global_avg_pool", [](const TensorList& in) { return global_avg_pool(in[0]); },
          [](const TensorList& in, const Tensor<double>& g) {
            return TensorList{global_avg_pool_backward(in[0].shape(), g)};
          }};
}

inline DifferentiableOp linear_op() {
  return {"linear", [](const TensorList& in) { return linear(in[0], in[1], &in[2]); },
          [](const TensorList& in, const Tensor<double>& g) {
            auto r = linear_backward(in[0], in[1], true, g);
            return TensorList{r.input, r.weight, r.bias};
          }};
}

inline DifferentiableOp upsample_op(Index oh, Index ow) {
  return {"bilinear_upsample", [oh, ow](const TensorList& in) { return bilinear_upsample(in[0], oh, ow); },
          [](const TensorList& in, const Tensor<double>& g) {
            return TensorList{bilinear_upsample_backward(in[0].shape(), g)};
          }};
}

inline DifferentiableOp add_op() {
  return {"add", [](const TensorList& in) { return add(in[0], in[1]); },
          [](const TensorList&, const Tensor<double>& g) { return TensorList{g, g}; }};
}

inline DifferentiableOp concat_op() {
  return {"concat_channels", [](const TensorList& in) { return concat_channels(in[0], in[1]); },
          [](const TensorList& in, const Tensor<double>& g) {
            auto [a, b] = concat_channels_backward(in[0].shape().c, g);
            return TensorList{a, b};
          }};
}

inline DifferentiableOp phase_mask_op(Index period) {
  return {"phase_mask", [period](const TensorList& in) { return phase_mask(in[0], period); },
          [period](const TensorList&, const Tensor<double>& g) { return TensorList{phase_mask(g, period)}; }};
}

inline DifferentiableOp cross_entropy_op(const LabelMap& labels) {
  return {"softmax_cross_entropy",
          [labels](const TensorList& in) {
            return Tensor<double>(Shape{1, 1, 1, 1}, softmax_cross_entropy(in[0], labels).loss);
          },
          [labels](const TensorList& in, const Tensor<double>& g) {
            auto r = softmax_cross_entropy(in[0], labels);
            Tensor<double> grad(r.grad.shape(), r.grad.vec() * g.data()[0]);
            return TensorList{grad};
          }};
}

struct GradcheckCase {
  DifferentiableOp op;
  TensorList inputs;
};

// Random small instances of every differentiable operator; `instance` selects
// geometry and values.
inline std::vector<GradcheckCase> gradcheck_cases(int instance) {
  std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(instance));
  std::vector<GradcheckCase> cases;
  const Index n = 1 + instance % 2;

  {
    ConvAttrs a;
    const Index k = (instance % 3 == 2) ? 1 : 3;
    a.kernel = {k, k};
    a.stride = {1 + instance % 2, 1 + (instance + 1) % 2};
    a.dilation = {1 + (instance % 3 == 0), 2 - (instance % 2)};
    a.padding = {same_padding(k, a.dilation.h), same_padding(k, a.dilation.w)};
    a.in_channels = 2;
    a.out_channels = 3;
    a.bias = instance % 2 == 1;
    TensorList in{random_tensor(rng, {n, 2, 5, 6}), random_tensor(rng, a.weight_shape(false))};
    if (a.bias) in.push_back(random_tensor(rng, {1, 3, 1, 1}));
    cases.push_back({conv_op(a), in});
  }
  {
    ConvAttrs a;
    a.kernel = {3, 3};
    a.stride = {1 + instance % 2, 2};
    a.dilation = {1 + (instance % 3 == 1), 1};
    a.padding = {same_padding(3, a.dilation.h), 1};
    a.output_padding = {a.stride.h - 1, 1};
    a.in_channels = 3;
    a.out_channels = 2;
    a.bias = instance % 2 == 0;
    TensorList in{random_tensor(rng, {n, 3, 3, 4}), random_tensor(rng, a.weight_shape(true))};
    if (a.bias) in.push_back(random_tensor(rng, {1, 2, 1, 1}));
    cases.push_back({conv_transpose_op(a), in});
  }
  for (BNMode mode : {BNMode::Train, BNMode::Eval}) {
    const Index c = 3;
    cases.push_back({batchnorm_op(mode),
                     {random_tensor(rng, {2, c, 4, 4}, -2.0, 3.0), random_tensor(rng, {1, c, 1, 1}, 0.5, 1.5),
                      random_tensor(rng, {1, c, 1, 1})}});
  }
  {
    // Keep inputs away from the kink.
    Tensor<double> x = random_tensor(rng, {n, 2, 3, 3}, 0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (Index i = 0; i < x.size(); ++i) {
      if (sign(rng)) x.data()[i] = -x.data()[i];
    }
    cases.push_back({relu_op(), {x}});
  }
  {
    AvgPoolAttrs a;
    a.window = {2, 2};
    a.stride = {2 - instance % 2, 2 - instance % 2};
    a.dilation = {1 + instance % 2, 1 + instance % 2};
    a.pad_end = {(instance % 2) * a.dilation.h, (instance % 2) * a.dilation.w};
    cases.push_back({avg_pool_op(a), {random_tensor(rng, {n, 2, 5, 6})}});
  }
  cases.push_back({global_pool_op(), {random_tensor(rng, {n, 3, 3, 2})}});
  cases.push_back({linear_op(),
                   {random_tensor(rng, {n, 4, 1, 1}), random_tensor(rng, {3, 4, 1, 1}),
                    random_tensor(rng, {1, 3, 1, 1})}});
  cases.push_back({upsample_op(7 + instance, 5 + 2 * instance), {random_tensor(rng, {n, 2, 3, 4})}});
  cases.push_back({add_op(), {random_tensor(rng, {n, 2, 3, 3}), random_tensor(rng, {n, 2, 3, 3})}});
  cases.push_back({concat_op(), {random_tensor(rng, {n, 2, 3, 3}), random_tensor(rng, {n, 1, 3, 3})}});
  cases.push_back({phase_mask_op(2 + instance % 2), {random_tensor(rng, {n, 2, 5, 5})}});
  {
    LabelMap labels(n, 3, 4);
    std::uniform_int_distribution<int> cls(0, 3);
    for (auto& v : labels.data) v = cls(rng);
    labels.data[1] = kDefaultIgnoreIndex;
    cases.push_back({cross_entropy_op(labels), {random_tensor(rng, {n, 4, 3, 4}, -2.0, 2.0)}});
  }
  return cases;
}

}  // namespace sunet::testing
