#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sunet/graph.hpp"

namespace sunet {

/// Trainable tensors keyed "<node>/weight" and "<node>/bias", plus per-node
/// batch-norm state keyed by node name.
template <typename Scalar>
struct ParamStore {
  std::map<std::string, Tensor<Scalar>> tensors;
  std::map<std::string, BNState<Scalar>> bn;

  const Tensor<Scalar>& weight(const std::string& node) const;
  const Tensor<Scalar>* bias(const std::string& node) const;

  template <typename Other>
  ParamStore<Other> cast() const;
};

/// Fan-in normal initialization for conv and linear weights, zero biases,
/// identity batch norms. Deterministic in `seed`; each tensor draws from its
/// own stream derived from the seed and the tensor name.
template <typename Scalar>
ParamStore<Scalar> init_params(const NetworkGraph& g, std::uint64_t seed);

/// Every weight and bias set to `value`; batch norms at identity.
template <typename Scalar>
ParamStore<Scalar> constant_params(const NetworkGraph& g, Scalar value);

enum class Phase { Train, Eval };

template <typename Scalar>
struct ForwardState {
  Phase phase = Phase::Eval;
  std::vector<Tensor<Scalar>> values;     // per-node outputs (empty past `stop`)
  std::vector<BNCache<Scalar>> bn_cache;  // train phase only
  std::vector<ConvAttrs> resolved;        // transposed-conv attrs after size matching
  int stop = -1;

  const Tensor<Scalar>& output() const { return values.at(static_cast<std::size_t>(stop)); }
};

/// Runs nodes 0..stop (default: the graph output). Train phase uses batch
/// statistics and updates the running averages in `params`.
template <typename Scalar>
ForwardState<Scalar> forward(const NetworkGraph& g, ParamStore<Scalar>& params, const Tensor<Scalar>& x, Phase phase,
                             int stop = -1);
/// Eval-phase forward on read-only parameters.
template <typename Scalar>
ForwardState<Scalar> forward(const NetworkGraph& g, const ParamStore<Scalar>& params, const Tensor<Scalar>& x,
                             int stop = -1);

template <typename Scalar>
struct Gradients {
  std::map<std::string, Tensor<Scalar>> tensors;  // same keys as ParamStore::tensors
  std::map<std::string, VectorX<Scalar>> gamma;
  std::map<std::string, VectorX<Scalar>> beta;
  Tensor<Scalar> input;
};

/// Reverse pass from node `seed` with upstream gradient `grad`. Only ancestors
/// of the seed receive gradients.
template <typename Scalar>
Gradients<Scalar> backward(const NetworkGraph& g, const ParamStore<Scalar>& params, const ForwardState<Scalar>& fwd,
                           int seed, const Tensor<Scalar>& grad);

}  // namespace sunet
