#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sunet/ops.hpp"

namespace sunet {

enum class LayerKind {
  Input,
  Conv,
  ConvTranspose,
  BatchNorm,
  Relu,
  AvgPool,
  GlobalAvgPool,
  Linear,
  Add,
  Concat,
  PhaseMask,
  Upsample,
};

const char* kind_name(LayerKind k);
LayerKind parse_kind(const std::string& s);

/// Role of a layer inside a u-net module; `None` for everything else.
enum class UNetRole { None, BottleneckIn, E1a, E1b, E2a, E2b, D2a, D2b, D1a, D1b, BottleneckOut, Expansion };

const char* role_name(UNetRole r);
UNetRole parse_role(const std::string& s);

/// One node of a NetworkGraph. Nodes refer to their producers by index and are
/// stored in topological order, so inputs always precede their consumers.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<int> inputs;

  ConvAttrs conv;      // Conv, ConvTranspose, Linear (channels and bias only)
  AvgPoolAttrs pool;   // AvgPool
  Index channels = 0;  // BatchNorm channel count
  Index period = 1;    // PhaseMask
  /// ConvTranspose: output_padding is chosen so the output matches this node's
  /// spatial size. Upsample: target size. -1 when unused.
  int size_ref = -1;

  // Tags.
  std::string group;               // "stem", "block3", "transition2", "head", ...
  int module = -1;                 // module index inside its block
  UNetRole role = UNetRole::None;  // position inside a u-net module
  int grid_factor = 0;             // sampling-grid multiple in the strided layout (u-net convs)
  Index stride_orig = 1;           // stride the layer had before multigrid rewriting
  int level = 0;                   // activation-dump level (0 = none)
  std::string stage;               // stage label for the spatial trace (empty = not a stage end)
  bool main_path = true;           // counted by the layer-count convention
};

struct NetworkGraph {
  /// Declared per-image input (c, h, w); n is ignored.
  Shape input{1, 3, 224, 224};
  std::vector<LayerSpec> nodes;
  int output = -1;

  int add(LayerSpec spec);
  const LayerSpec& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }
  LayerSpec& node(int id) { return nodes.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(nodes.size()); }
  int find(const std::string& name) const;  // -1 if absent

  /// Acyclicity, arity, single output and attribute sanity; throws ShapeError.
  void validate() const;
};

// Builders shared by the module and architecture constructors.
int add_input(NetworkGraph& g, Index channels, Index h, Index w);
int add_conv(NetworkGraph& g, const std::string& name, int in, Index cin, Index cout, Index k, Index stride,
             Index dilation, bool bias = false);
int add_conv_transpose(NetworkGraph& g, const std::string& name, int in, Index cin, Index cout, Index k,
                       Index stride, Index dilation, int size_ref);
int add_bn(NetworkGraph& g, const std::string& name, int in, Index channels);
int add_relu(NetworkGraph& g, const std::string& name, int in);
int add_binary(NetworkGraph& g, LayerKind kind, const std::string& name, int a, int b);

/// Text form: one header line, one line per node with key=value attributes.
void write_graph(std::ostream& os, const NetworkGraph& g);
NetworkGraph read_graph(std::istream& is);
std::string graph_to_string(const NetworkGraph& g);
void save_graph(const std::filesystem::path& p, const NetworkGraph& g);
NetworkGraph load_graph(const std::filesystem::path& p);

/// FNV-1a 64 of the serialized body.
std::uint64_t graph_digest(const NetworkGraph& g);
std::string hex_digest(std::uint64_t d);

}  // namespace sunet
