#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sunet/executor.hpp"
#include "sunet/raster.hpp"

namespace sunet {

template <typename Scalar>
struct LevelDump {
  int level = 0;
  std::string node;
  Index channel = 0;
  double l1 = 0.0;
  Tensor<Scalar> map;  // (1, 1, h, w)
};

template <typename Scalar>
struct ActivationDumps {
  std::vector<LevelDump<Scalar>> levels;  // ascending level
  LabelMap prediction;                    // empty unless the graph ends in class scores
};

/// Eval-mode forward of the first image in `input`; for every marked level
/// the channel with the largest L1 norm at the last node carrying that level.
/// The prediction map is the channel argmax of the graph output when the
/// graph is a segmentation network.
template <typename Scalar>
ActivationDumps<Scalar> dump_activations(const NetworkGraph& g, const ParamStore<Scalar>& params,
                                         const Tensor<Scalar>& input);

/// level_<k>.sutn and level_<k>.pgm per level, prediction.pgm when present.
/// Returns the written paths.
template <typename Scalar>
std::vector<std::filesystem::path> write_activation_dumps(const ActivationDumps<Scalar>& d,
                                                          const std::filesystem::path& dir);

}  // namespace sunet
