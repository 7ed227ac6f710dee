#pragma once

#include <string>

#include "sunet/graph.hpp"

namespace sunet {

enum class ModuleMode { Strided, Multigrid };
enum class SkipKind { Identity, Expansion };

/// One u-net module: M input features, N features per internal layer, O outputs.
struct UNetModuleSpec {
  Index in_channels = 0;   // M
  Index width = 0;         // N
  Index out_channels = 0;  // O
  bool trimmed = false;    // single encoder/decoder level
  ModuleMode mode = ModuleMode::Strided;
  /// Multigrid: dilation multiplier r. Strided: dilation applied to every 3×3 layer.
  Index base_dilation = 1;
  SkipKind skip = SkipKind::Identity;

  void validate() const;
  int conv_blocks() const { return trimmed ? 6 : 10; }
};

/// Sampling-grid multiple of a role in the strided layout; transposed layers
/// take the factor of the grid they produce.
int grid_factor(UNetRole role);

/// Rewrites stride, dilation, padding and output_padding of a u-net conv or
/// transposed conv for the given mode. `stride_orig` and `grid_factor` must be
/// set. Multigrid transposed layers additionally need a phase mask of period
/// stride_orig · dilation in front of them.
void configure_unet_layer(LayerSpec& layer, ModuleMode mode, Index base_dilation);

/// Appends a module reading from node `in` and returns the residual-join node.
/// Nodes are named "<prefix>/<role>/<op>".
int append_unet_module(NetworkGraph& g, int in, const UNetModuleSpec& spec, const std::string& prefix,
                       const std::string& group = "", int module_index = 0);

/// Standalone module graph on an (M, h, w) input.
NetworkGraph build_unet_module(const UNetModuleSpec& spec, Index h, Index w);
/// Same as build_unet_module but requires spec.trimmed.
NetworkGraph build_unet_plus(const UNetModuleSpec& spec, Index h, Index w);

}  // namespace sunet
