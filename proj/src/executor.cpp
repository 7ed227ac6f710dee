#include "sunet/executor.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "sunet/analysis.hpp"
#include "sunet/rng.hpp"

namespace sunet {

namespace {

bool has_weight(LayerKind k) {
  return k == LayerKind::Conv || k == LayerKind::ConvTranspose || k == LayerKind::Linear;
}

Shape weight_shape(const LayerSpec& n) {
  if (n.kind == LayerKind::Linear) return {n.conv.out_channels, n.conv.in_channels, 1, 1};
  return n.conv.weight_shape(n.kind == LayerKind::ConvTranspose);
}

template <typename Scalar>
void accumulate(Tensor<Scalar>& slot, const Tensor<Scalar>& g) {
  if (slot.empty()) {
    slot = g;
  } else {
    slot.vec() += g.vec();
  }
}

}  // namespace

template <typename Scalar>
const Tensor<Scalar>& ParamStore<Scalar>::weight(const std::string& node) const {
  auto it = tensors.find(node + "/weight");
  if (it == tensors.end()) throw std::out_of_range("missing parameter " + node + "/weight");
  return it->second;
}

template <typename Scalar>
const Tensor<Scalar>* ParamStore<Scalar>::bias(const std::string& node) const {
  auto it = tensors.find(node + "/bias");
  return it == tensors.end() ? nullptr : &it->second;
}

template <typename Scalar>
template <typename Other>
ParamStore<Other> ParamStore<Scalar>::cast() const {
  ParamStore<Other> out;
  for (const auto& [k, t] : tensors) out.tensors.emplace(k, t.template cast<Other>());
  for (const auto& [k, s] : bn) {
    BNState<Other> o;
    o.gamma = s.gamma.template cast<Other>();
    o.beta = s.beta.template cast<Other>();
    o.running_mean = s.running_mean.template cast<Other>();
    o.running_var = s.running_var.template cast<Other>();
    o.decay = static_cast<Other>(s.decay);
    o.eps = static_cast<Other>(s.eps);
    o.mode = s.mode;
    out.bn.emplace(k, std::move(o));
  }
  return out;
}

template <typename Scalar>
ParamStore<Scalar> init_params(const NetworkGraph& g, std::uint64_t seed) {
  ParamStore<Scalar> p;
  for (const LayerSpec& n : g.nodes) {
    if (n.kind == LayerKind::BatchNorm) {
      p.bn.emplace(n.name, BNState<Scalar>::identity(n.channels));
      continue;
    }
    if (!has_weight(n.kind)) continue;
    const Shape ws = weight_shape(n);
    double fan_in = static_cast<double>(n.conv.in_channels * n.conv.kernel.h * n.conv.kernel.w);
    if (n.kind == LayerKind::ConvTranspose) {
      fan_in /= static_cast<double>(n.stride_orig * n.stride_orig);
    }
    std::mt19937_64 rng(splitmix64(seed ^ fnv1a64(n.name)));
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / std::max(fan_in, 1.0)));
    Tensor<Scalar> w(ws);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(normal(rng));
    p.tensors.emplace(n.name + "/weight", std::move(w));
    if (n.conv.bias) p.tensors.emplace(n.name + "/bias", Tensor<Scalar>(Shape{1, n.conv.out_channels, 1, 1}));
  }
  return p;
}

template <typename Scalar>
ParamStore<Scalar> constant_params(const NetworkGraph& g, Scalar value) {
  ParamStore<Scalar> p;
  for (const LayerSpec& n : g.nodes) {
    if (n.kind == LayerKind::BatchNorm) {
      p.bn.emplace(n.name, BNState<Scalar>::identity(n.channels));
    } else if (has_weight(n.kind)) {
      p.tensors.emplace(n.name + "/weight", Tensor<Scalar>(weight_shape(n), value));
      if (n.conv.bias) p.tensors.emplace(n.name + "/bias", Tensor<Scalar>(Shape{1, n.conv.out_channels, 1, 1}, value));
    }
  }
  return p;
}

namespace {

// Weights are read-only; batch-norm states are written in the train phase.
template <typename Scalar>
ForwardState<Scalar> run_forward(const NetworkGraph& g, const ParamStore<Scalar>& params,
                                 std::map<std::string, BNState<Scalar>>& bn, const Tensor<Scalar>& x, Phase phase,
                                 int stop) {
  if (stop < 0) stop = g.output;
  if (stop >= g.size()) throw std::out_of_range("forward: stop node out of range");
  ForwardState<Scalar> st;
  st.phase = phase;
  st.stop = stop;
  st.values.resize(g.nodes.size());
  st.bn_cache.resize(g.nodes.size());
  st.resolved.resize(g.nodes.size());
  if (x.shape().c != g.input.c) {
    throw ShapeError("forward: input has " + std::to_string(x.shape().c) + " channels, graph expects " +
                     std::to_string(g.input.c));
  }
  const BNMode mode = phase == Phase::Train ? BNMode::Train : BNMode::Eval;

  for (int i = 0; i <= stop; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const LayerSpec& n = g.node(i);
    auto in = [&](std::size_t j) -> const Tensor<Scalar>& { return st.values[static_cast<std::size_t>(n.inputs[j])]; };
    Tensor<Scalar>& out = st.values[k];
    switch (n.kind) {
      case LayerKind::Input:
        out = x;
        break;
      case LayerKind::Conv:
        out = conv2d(in(0), params.weight(n.name), params.bias(n.name), n.conv);
        break;
      case LayerKind::ConvTranspose: {
        ConvAttrs a = n.conv;
        if (n.size_ref >= 0) {
          const Shape t = st.values[static_cast<std::size_t>(n.size_ref)].shape();
          a = resolve_transpose(n, in(0).shape().h, in(0).shape().w, t.h, t.w);
        }
        st.resolved[k] = a;
        out = conv2d_transpose(in(0), params.weight(n.name), params.bias(n.name), a);
        break;
      }
      case LayerKind::BatchNorm: {
        auto it = bn.find(n.name);
        if (it == bn.end()) throw std::out_of_range("missing batch-norm state " + n.name);
        it->second.mode = mode;
        out = batchnorm(in(0), it->second, &st.bn_cache[k]);
        break;
      }
      case LayerKind::Relu:
        out = relu(in(0));
        break;
      case LayerKind::AvgPool:
        out = avg_pool2d(in(0), n.pool);
        break;
      case LayerKind::GlobalAvgPool:
        out = global_avg_pool(in(0));
        break;
      case LayerKind::Linear:
        out = linear(in(0), params.weight(n.name), params.bias(n.name));
        break;
      case LayerKind::Add:
        out = add(in(0), in(1));
        break;
      case LayerKind::Concat:
        out = concat_channels(in(0), in(1));
        break;
      case LayerKind::PhaseMask:
        out = phase_mask(in(0), n.period);
        break;
      case LayerKind::Upsample: {
        const Shape t = st.values[static_cast<std::size_t>(n.size_ref < 0 ? 0 : n.size_ref)].shape();
        out = bilinear_upsample(in(0), t.h, t.w);
        break;
      }
    }
  }
  return st;
}

}  // namespace

template <typename Scalar>
ForwardState<Scalar> forward(const NetworkGraph& g, ParamStore<Scalar>& params, const Tensor<Scalar>& x, Phase phase,
                             int stop) {
  return run_forward(g, params, params.bn, x, phase, stop);
}

template <typename Scalar>
ForwardState<Scalar> forward(const NetworkGraph& g, const ParamStore<Scalar>& params, const Tensor<Scalar>& x,
                             int stop) {
  // The batch-norm op takes its state by reference even in eval mode.
  auto bn = params.bn;
  return run_forward(g, params, bn, x, Phase::Eval, stop);
}

template <typename Scalar>
Gradients<Scalar> backward(const NetworkGraph& g, const ParamStore<Scalar>& params, const ForwardState<Scalar>& fwd,
                           int seed, const Tensor<Scalar>& grad) {
  if (seed < 0 || seed > fwd.stop) throw std::out_of_range("backward: seed node was not computed");
  if (!(grad.shape() == fwd.values[static_cast<std::size_t>(seed)].shape())) {
    throw ShapeError("backward: seed gradient shape " + to_string(grad.shape()) + " does not match node output");
  }
  std::vector<Tensor<Scalar>> gr(g.nodes.size());
  gr[static_cast<std::size_t>(seed)] = grad;
  Gradients<Scalar> res;

  for (int i = seed; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    if (gr[k].empty()) continue;
    const Tensor<Scalar>& dy = gr[k];
    const LayerSpec& n = g.node(i);
    auto x = [&](std::size_t j) -> const Tensor<Scalar>& { return fwd.values[static_cast<std::size_t>(n.inputs[j])]; };
    auto send = [&](std::size_t j, const Tensor<Scalar>& t) { accumulate(gr[static_cast<std::size_t>(n.inputs[j])], t); };
    switch (n.kind) {
      case LayerKind::Input:
        res.input = dy;
        break;
      case LayerKind::Conv: {
        auto r = conv2d_backward(x(0), params.weight(n.name), n.conv, dy);
        send(0, r.input);
        accumulate(res.tensors[n.name + "/weight"], r.weight);
        if (n.conv.bias) accumulate(res.tensors[n.name + "/bias"], r.bias);
        break;
      }
      case LayerKind::ConvTranspose: {
        auto r = conv2d_transpose_backward(x(0), params.weight(n.name), fwd.resolved[k], dy);
        send(0, r.input);
        accumulate(res.tensors[n.name + "/weight"], r.weight);
        if (n.conv.bias) accumulate(res.tensors[n.name + "/bias"], r.bias);
        break;
      }
      case LayerKind::BatchNorm: {
        auto r = batchnorm_backward(x(0), params.bn.at(n.name), fwd.bn_cache[k], dy);
        send(0, r.input);
        res.gamma[n.name] = r.gamma;
        res.beta[n.name] = r.beta;
        break;
      }
      case LayerKind::Relu:
        send(0, relu_backward(x(0), dy));
        break;
      case LayerKind::AvgPool:
        send(0, avg_pool2d_backward(x(0), n.pool, dy));
        break;
      case LayerKind::GlobalAvgPool:
        send(0, global_avg_pool_backward(x(0).shape(), dy));
        break;
      case LayerKind::Linear: {
        auto r = linear_backward(x(0), params.weight(n.name), n.conv.bias, dy);
        send(0, r.input);
        accumulate(res.tensors[n.name + "/weight"], r.weight);
        if (n.conv.bias) accumulate(res.tensors[n.name + "/bias"], r.bias);
        break;
      }
      case LayerKind::Add:
        send(0, dy);
        send(1, dy);
        break;
      case LayerKind::Concat: {
        auto [a, b] = concat_channels_backward(x(0).shape().c, dy);
        send(0, a);
        send(1, b);
        break;
      }
      case LayerKind::PhaseMask:
        send(0, phase_mask(dy, n.period));
        break;
      case LayerKind::Upsample:
        send(0, bilinear_upsample_backward(x(0).shape(), dy));
        break;
    }
    gr[k] = Tensor<Scalar>();  // release early
  }
  return res;
}

#define SUNET_INSTANTIATE_EXECUTOR(S)                                                                            \
  template struct ParamStore<S>;                                                                                 \
  template ParamStore<S> init_params<S>(const NetworkGraph&, std::uint64_t);                                     \
  template ParamStore<S> constant_params<S>(const NetworkGraph&, S);                                             \
  template ForwardState<S> forward(const NetworkGraph&, ParamStore<S>&, const Tensor<S>&, Phase, int);           \
  template ForwardState<S> forward(const NetworkGraph&, const ParamStore<S>&, const Tensor<S>&, int);            \
  template Gradients<S> backward(const NetworkGraph&, const ParamStore<S>&, const ForwardState<S>&, int,         \
                                 const Tensor<S>&);

SUNET_INSTANTIATE_EXECUTOR(float)
SUNET_INSTANTIATE_EXECUTOR(double)
template ParamStore<double> ParamStore<float>::cast<double>() const;
template ParamStore<float> ParamStore<double>::cast<float>() const;
template ParamStore<float> ParamStore<float>::cast<float>() const;
template ParamStore<double> ParamStore<double>::cast<double>() const;

#undef SUNET_INSTANTIATE_EXECUTOR

}  // namespace sunet
