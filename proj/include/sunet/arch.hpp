#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "sunet/graph.hpp"

namespace sunet {

struct BlockSpec {
  int modules = 1;
  Index width = 64;         // N
  Index out_channels = 256; // O
  bool trimmed = false;
  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

enum class HeadKind { Classification, None };

struct SUNetConfig {
  std::string name = "custom";
  Index in_channels = 3;
  Index stem_channels = 64;   // 7×7 stride-2 conv
  Index stem_out = 128;       // residual block after the 7×7 conv
  std::array<BlockSpec, 4> blocks{};
  HeadKind head = HeadKind::Classification;
  Index num_classes = 1000;

  void validate() const;
  friend bool operator==(const SUNetConfig&, const SUNetConfig&) = default;
};

std::vector<std::string> preset_names();
/// sunet64, sunet128 or sunet7_128; throws std::invalid_argument otherwise.
SUNetConfig preset(const std::string& name);

std::string config_to_json(const SUNetConfig& cfg);
SUNetConfig config_from_json(const std::string& text);
SUNetConfig load_config(const std::filesystem::path& p);

/// stem → block1 → pool → block2 → pool → block3 → pool → block4 → BN-ReLU → head.
/// Input extents must be divisible by 32.
NetworkGraph build_classifier(const SUNetConfig& cfg, Index input_h, Index input_w);

/// Conv + transposed-conv + fully-connected layers on the main path; residual
/// projections (stem skip, expansion layers) are not counted.
int count_layers(const NetworkGraph& g);

}  // namespace sunet
