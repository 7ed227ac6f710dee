#pragma once

#include <array>

#include "sunet/executor.hpp"
#include "sunet/graph.hpp"

namespace sunet {

struct SegmentationConfig {
  int output_stride = 16;  // 8, 16 or 32
  bool multigrid = true;   // false keeps the internal strides of dilated modules
  bool degridding = false;
  Index num_classes = 21;
  bool upsample_to_input = true;

  void validate() const;
};

/// Module dilation multiplier for blocks 1..4 at an output stride.
std::array<Index, 4> block_dilations(int output_stride);

/// Name of the node holding the final backbone features (after the last BN-ReLU).
inline constexpr const char* kFeatureNode = "head/relu";

/// Rewrites a classifier built by build_classifier into a dense predictor:
/// head removed, transitions before dilated blocks lose their stride, dilated
/// modules rewired, then optional degridding, a 1×1 classifier and a bilinear
/// resize to the input extent.
NetworkGraph to_segmentation(const NetworkGraph& g, const SegmentationConfig& cfg);

struct EquivalenceResult {
  double max_abs_diff = 0.0;
  Index compared = 0;        // positions × channels × batch compared
  Index interior_positions = 0;  // coarse positions whose field stays inside the input
  Index factor = 1;          // subsampling factor applied to the fine map
  Shape coarse;
  Shape fine;
};

/// Runs both graphs up to kFeatureNode in eval mode with shared parameters and
/// compares the coarse features with the fine ones subsampled at phase 0.
/// With `interior_only`, only positions whose receptive field lies inside the
/// input take part; otherwise every coarse position is compared.
template <typename Scalar>
EquivalenceResult atrous_equivalence_check(const NetworkGraph& coarse, const NetworkGraph& fine,
                                           const ParamStore<Scalar>& params, const Tensor<Scalar>& input,
                                           bool interior_only = false);

}  // namespace sunet
