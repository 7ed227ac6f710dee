#include "sunet/dilation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sunet/analysis.hpp"
#include "sunet/unet_module.hpp"

namespace sunet {

namespace {

int block_index(const std::string& group, const char* prefix) {
  const std::string p(prefix);
  if (group.size() != p.size() + 1 || group.compare(0, p.size(), p) != 0) return -1;
  const char c = group.back();
  return (c >= '1' && c <= '4') ? c - '1' : -1;
}

bool is_unet_conv(const LayerSpec& n) {
  return (n.kind == LayerKind::Conv || n.kind == LayerKind::ConvTranspose) && n.role != UNetRole::None &&
         n.role != UNetRole::Expansion;
}

std::string replace_suffix(const std::string& name, const std::string& from, const std::string& to) {
  if (name.size() >= from.size() && name.compare(name.size() - from.size(), from.size(), from) == 0) {
    return name.substr(0, name.size() - from.size()) + to;
  }
  return name + to;
}

}  // namespace

void SegmentationConfig::validate() const {
  if (output_stride != 8 && output_stride != 16 && output_stride != 32) {
    throw std::invalid_argument("output_stride must be 8, 16 or 32 (got " + std::to_string(output_stride) + ")");
  }
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
}

std::array<Index, 4> block_dilations(int output_stride) {
  switch (output_stride) {
    case 32:
      return {1, 1, 1, 1};
    case 16:
      return {1, 1, 1, 2};
    case 8:
      return {1, 1, 2, 4};
    default:
      throw std::invalid_argument("output_stride must be 8, 16 or 32 (got " + std::to_string(output_stride) + ")");
  }
}

NetworkGraph to_segmentation(const NetworkGraph& g, const SegmentationConfig& cfg) {
  cfg.validate();
  g.validate();
  const int feature = g.find(kFeatureNode);
  if (feature < 0) throw std::invalid_argument("to_segmentation: graph lacks the tagged '" + std::string(kFeatureNode) + "' node");
  for (const LayerSpec& n : g.nodes) {
    if (n.kind == LayerKind::PhaseMask || n.group == "seg") {
      throw std::invalid_argument("to_segmentation: graph is already a segmentation network");
    }
  }
  bool tagged = false;
  for (const LayerSpec& n : g.nodes) tagged = tagged || block_index(n.group, "block") >= 0;
  if (!tagged) throw std::invalid_argument("to_segmentation: graph has no block tags");

  const auto dil = block_dilations(cfg.output_stride);
  const ModuleMode mode = cfg.multigrid ? ModuleMode::Multigrid : ModuleMode::Strided;

  NetworkGraph out;
  out.input = g.input;
  std::vector<int> remap(g.nodes.size(), -1);
  for (int i = 0; i <= feature; ++i) {
    LayerSpec n = g.node(i);
    for (int& in : n.inputs) in = remap[static_cast<std::size_t>(in)];
    if (n.size_ref >= 0) n.size_ref = remap[static_cast<std::size_t>(n.size_ref)];

    const int tr = block_index(n.group, "transition");
    if (n.kind == LayerKind::AvgPool && tr >= 1 && dil[static_cast<std::size_t>(tr)] > 1) {
      const Index d = dil[static_cast<std::size_t>(tr - 1)];
      n.pool.stride = {1, 1};
      n.pool.dilation = {d, d};
      n.pool.pad_end = {(n.pool.window.h - 1) * d, (n.pool.window.w - 1) * d};
    }
    const int b = block_index(n.group, "block");
    if (b >= 0 && is_unet_conv(n) && dil[static_cast<std::size_t>(b)] > 1) {
      configure_unet_layer(n, mode, dil[static_cast<std::size_t>(b)]);
      if (n.kind == LayerKind::ConvTranspose && mode == ModuleMode::Multigrid) {
        LayerSpec mask;
        mask.name = replace_suffix(n.name, "/tconv", "/mask");
        mask.kind = LayerKind::PhaseMask;
        mask.inputs = n.inputs;
        mask.period = n.stride_orig * n.conv.dilation.h;
        mask.group = n.group;
        mask.module = n.module;
        mask.role = n.role;
        mask.main_path = false;
        n.inputs = {out.add(std::move(mask))};
      }
    }
    remap[static_cast<std::size_t>(i)] = out.add(std::move(n));
  }

  int x = remap[static_cast<std::size_t>(feature)];
  Index channels = g.node(g.find("head/bn")).channels;
  auto tag = [&out](int id) {
    out.node(id).group = "seg";
    return id;
  };
  if (cfg.degridding) {
    const Index final_d = dil[3];
    const Index rates[2] = {std::max<Index>(final_d / 2, 1), std::max<Index>(final_d / 4, 1)};
    for (int j = 0; j < 2; ++j) {
      const std::string base = "seg/degrid" + std::to_string(j + 1);
      x = tag(add_conv(out, base + "/conv", x, channels, 512, 3, 1, rates[j]));
      x = tag(add_bn(out, base + "/bn", x, 512));
      x = tag(add_relu(out, base + "/relu", x));
      channels = 512;
    }
  }
  x = tag(add_conv(out, "seg/classifier/conv", x, channels, cfg.num_classes, 1, 1, 1, true));
  out.node(x).level = 6;
  out.node(x).stage = "logits";
  if (cfg.upsample_to_input) {
    LayerSpec up;
    up.name = "seg/upsample";
    up.kind = LayerKind::Upsample;
    up.inputs = {x};
    up.size_ref = 0;
    up.group = "seg";
    up.main_path = false;
    tag(out.add(std::move(up)));
  }
  out.validate();
  return out;
}

template <typename Scalar>
EquivalenceResult atrous_equivalence_check(const NetworkGraph& coarse, const NetworkGraph& fine,
                                           const ParamStore<Scalar>& params, const Tensor<Scalar>& input,
                                           bool interior_only) {
  const int fc = coarse.find(kFeatureNode);
  const int ff = fine.find(kFeatureNode);
  if (fc < 0 || ff < 0) throw std::invalid_argument("atrous_equivalence_check: feature node missing");

  const auto cs = infer_shapes(coarse, input.shape());
  const auto fs = infer_shapes(fine, input.shape());
  const auto crf = receptive_field(coarse, cs);
  const auto frf = receptive_field(fine, fs);
  const Rational ratio = crf[static_cast<std::size_t>(fc)].jump / frf[static_cast<std::size_t>(ff)].jump;
  if (!ratio.is_integer() || ratio.num() < 1) {
    throw ShapeError("atrous_equivalence_check: output strides are not integer multiples");
  }

  EquivalenceResult r;
  r.factor = ratio.num();
  const Tensor<Scalar> a = forward(coarse, params, input, fc).output();
  const Tensor<Scalar> b = subsample(forward(fine, params, input, ff).output(), r.factor);
  r.coarse = a.shape();
  r.fine = fs[static_cast<std::size_t>(ff)];
  if (a.shape().c != b.shape().c || a.shape().h > b.shape().h || a.shape().w > b.shape().w) {
    throw ShapeError("atrous_equivalence_check: coarse " + to_string(a.shape()) + " vs subsampled fine " +
                     to_string(b.shape()));
  }

  // A coarse position is interior when its whole field lies inside the image.
  const RFState& s = crf[static_cast<std::size_t>(fc)];
  const Rational half_rf = (s.rf - Rational(1)) / Rational(2);
  auto inside = [&](Index i, Index extent) {
    const Rational c = s.center + s.jump * Rational(i);
    return !(c - half_rf < Rational(0)) && !(Rational(extent - 1) < c + half_rf);
  };

  const Shape& sh = a.shape();
  for (Index i = 0; i < sh.h; ++i) {
    for (Index j = 0; j < sh.w; ++j) {
      const bool interior = inside(i, input.shape().h) && inside(j, input.shape().w);
      if (interior) ++r.interior_positions;
      if (interior_only && !interior) continue;
      for (Index n = 0; n < sh.n; ++n) {
        for (Index c = 0; c < sh.c; ++c) {
          const double d = std::abs(static_cast<double>(a(n, c, i, j)) - static_cast<double>(b(n, c, i, j)));
          r.max_abs_diff = std::max(r.max_abs_diff, d);
          ++r.compared;
        }
      }
    }
  }
  return r;
}

template EquivalenceResult atrous_equivalence_check(const NetworkGraph&, const NetworkGraph&, const ParamStore<float>&,
                                                    const Tensor<float>&, bool);
template EquivalenceResult atrous_equivalence_check(const NetworkGraph&, const NetworkGraph&,
                                                    const ParamStore<double>&, const Tensor<double>&, bool);

}  // namespace sunet
