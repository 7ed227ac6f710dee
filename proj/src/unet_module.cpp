#include "sunet/unet_module.hpp"

#include <stdexcept>

namespace sunet {

namespace {

bool power_of_two(Index v) { return v >= 1 && (v & (v - 1)) == 0; }

struct Block {
  int bn = -1;
  int conv = -1;
};

// BN-ReLU-(mask)-conv with role tags. `transposed` selects a deconvolution.
class ModuleWriter {
 public:
  ModuleWriter(NetworkGraph& g, const UNetModuleSpec& spec, std::string prefix, std::string group, int module)
      : g_(g), spec_(spec), prefix_(std::move(prefix)), group_(std::move(group)), module_(module) {}

  int block(UNetRole role, int in, Index cin, Index cout, Index k, Index stride, bool transposed, int size_ref = -1) {
    const std::string base = prefix_ + "/" + role_name(role);
    int x = tag(add_bn(g_, base + "/bn", in, cin), role);
    x = tag(add_relu(g_, base + "/relu", x), role);

    LayerSpec conv;
    conv.name = base + (transposed ? "/tconv" : "/conv");
    conv.kind = transposed ? LayerKind::ConvTranspose : LayerKind::Conv;
    conv.conv.kernel = {k, k};
    conv.conv.in_channels = cin;
    conv.conv.out_channels = cout;
    conv.stride_orig = stride;
    conv.grid_factor = grid_factor(role);
    conv.size_ref = size_ref;
    configure_unet_layer(conv, spec_.mode, spec_.base_dilation);

    if (transposed && spec_.mode == ModuleMode::Multigrid) {
      LayerSpec mask;
      mask.name = base + "/mask";
      mask.kind = LayerKind::PhaseMask;
      mask.inputs = {x};
      mask.period = conv.stride_orig * conv.conv.dilation.h;
      mask.main_path = false;
      x = tag(g_.add(std::move(mask)), role);
    }
    conv.inputs = {x};
    return tag(g_.add(std::move(conv)), role);
  }

  int tag(int id, UNetRole role) {
    LayerSpec& n = g_.node(id);
    n.group = group_;
    n.module = module_;
    n.role = role;
    return id;
  }

 private:
  NetworkGraph& g_;
  const UNetModuleSpec& spec_;
  std::string prefix_;
  std::string group_;
  int module_;
};

}  // namespace

void UNetModuleSpec::validate() const {
  if (in_channels < 1 || width < 1 || out_channels < 1) {
    throw std::invalid_argument("u-net module: channel counts must be positive");
  }
  if (skip == SkipKind::Identity && in_channels != out_channels) {
    throw std::invalid_argument("u-net module: identity skip needs M == O (got " + std::to_string(in_channels) +
                                " and " + std::to_string(out_channels) + ")");
  }
  if (!power_of_two(base_dilation)) {
    throw std::invalid_argument("u-net module: base dilation must be a power of two >= 1");
  }
}

int grid_factor(UNetRole role) {
  switch (role) {
    case UNetRole::E1b:
    case UNetRole::E2a:
    case UNetRole::D2a:
    case UNetRole::D2b:
      return 2;
    case UNetRole::E2b:
      return 4;
    default:
      return 1;
  }
}

void configure_unet_layer(LayerSpec& layer, ModuleMode mode, Index base_dilation) {
  ConvAttrs& a = layer.conv;
  const bool spatial = a.kernel.h > 1 || a.kernel.w > 1;
  const Index s = layer.stride_orig;
  Index d = 1;
  if (spatial) d = mode == ModuleMode::Multigrid ? base_dilation * layer.grid_factor : base_dilation;
  const Index stride = mode == ModuleMode::Multigrid ? 1 : s;
  a.stride = {stride, stride};
  a.dilation = {d, d};
  a.padding = {same_padding(a.kernel.h, d), same_padding(a.kernel.w, d)};
  a.output_padding = layer.kind == LayerKind::ConvTranspose ? Pair{stride - 1, stride - 1} : Pair{0, 0};
}

int append_unet_module(NetworkGraph& g, int in, const UNetModuleSpec& spec, const std::string& prefix,
                       const std::string& group, int module_index) {
  spec.validate();
  ModuleWriter w(g, spec, prefix, group, module_index);
  const Index M = spec.in_channels, N = spec.width, O = spec.out_channels;

  const int bin = w.block(UNetRole::BottleneckIn, in, M, N, 1, 1, false);
  const int e1a = w.block(UNetRole::E1a, bin, N, N, 3, 2, false);
  const int e1b = w.block(UNetRole::E1b, e1a, N, N, 3, 1, false);
  int d1_in = e1b;
  Index d1_channels = N;
  if (!spec.trimmed) {
    const int e2a = w.block(UNetRole::E2a, e1b, N, N, 3, 2, false);
    const int e2b = w.block(UNetRole::E2b, e2a, N, N, 3, 1, false);
    const int d2a = w.block(UNetRole::D2a, e2b, N, N, 3, 2, true, e1b);
    const int d2b = w.block(UNetRole::D2b, d2a, N, N, 3, 1, false);
    d1_in = w.tag(add_binary(g, LayerKind::Concat, prefix + "/concat", e1b, d2b), UNetRole::None);
    d1_channels = 2 * N;
  }
  const int d1a = w.block(UNetRole::D1a, d1_in, d1_channels, N, 3, 2, true, bin);
  const int d1b = w.block(UNetRole::D1b, d1a, N, N, 3, 1, false);
  const int bout = w.block(UNetRole::BottleneckOut, d1b, N, O, 1, 1, false);

  int skip = in;
  if (spec.skip == SkipKind::Expansion) {
    skip = add_conv(g, prefix + "/expansion/conv", in, M, O, 1, 1, 1);
    g.node(skip).main_path = false;
    w.tag(skip, UNetRole::Expansion);
  }
  return w.tag(add_binary(g, LayerKind::Add, prefix + "/add", skip, bout), UNetRole::None);
}

NetworkGraph build_unet_module(const UNetModuleSpec& spec, Index h, Index w) {
  NetworkGraph g;
  const int in = add_input(g, spec.in_channels, h, w);
  append_unet_module(g, in, spec, "unet", "module", 0);
  g.validate();
  return g;
}

NetworkGraph build_unet_plus(const UNetModuleSpec& spec, Index h, Index w) {
  if (!spec.trimmed) throw std::invalid_argument("build_unet_plus: spec must be trimmed");
  return build_unet_module(spec, h, w);
}

}  // namespace sunet
