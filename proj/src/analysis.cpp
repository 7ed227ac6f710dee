#include "sunet/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace sunet {

Rational::Rational(std::int64_t num, std::int64_t den) : num_(num), den_(den) {
  if (den_ == 0) throw std::domain_error("Rational: zero denominator");
  if (den_ < 0) {
    num_ = -num_;
    den_ = -den_;
  }
  const std::int64_t g = std::gcd(num_ < 0 ? -num_ : num_, den_);
  if (g > 1) {
    num_ /= g;
    den_ /= g;
  }
}

std::string Rational::str() const {
  return den_ == 1 ? std::to_string(num_) : std::to_string(num_) + "/" + std::to_string(den_);
}

Rational operator+(Rational a, Rational b) { return {a.num_ * b.den_ + b.num_ * a.den_, a.den_ * b.den_}; }
Rational operator-(Rational a, Rational b) { return {a.num_ * b.den_ - b.num_ * a.den_, a.den_ * b.den_}; }
Rational operator*(Rational a, Rational b) { return {a.num_ * b.num_, a.den_ * b.den_}; }
Rational operator/(Rational a, Rational b) { return {a.num_ * b.den_, a.den_ * b.num_}; }
bool operator<(const Rational& a, const Rational& b) { return a.num_ * b.den_ < b.num_ * a.den_; }

namespace {

bool conv_like(LayerKind k) {
  return k == LayerKind::Conv || k == LayerKind::ConvTranspose || k == LayerKind::Linear;
}

[[noreturn]] void fail(const LayerSpec& n, const std::string& what) {
  throw ShapeError("node '" + n.name + "' (" + kind_name(n.kind) + "): " + what);
}

std::string shape_hw(const Shape& s) { return std::to_string(s.h) + "x" + std::to_string(s.w); }

}  // namespace

ConvAttrs resolve_transpose(const LayerSpec& layer, Index in_h, Index in_w, Index target_h, Index target_w) {
  ConvAttrs a = layer.conv;
  if (layer.size_ref < 0) return a;
  const Index bh = conv_transpose_out_size(in_h, a.kernel.h, a.stride.h, a.dilation.h, a.padding.h, 0);
  const Index bw = conv_transpose_out_size(in_w, a.kernel.w, a.stride.w, a.dilation.w, a.padding.w, 0);
  const Index oh = target_h - bh, ow = target_w - bw;
  if (oh < 0 || oh >= a.stride.h || ow < 0 || ow >= a.stride.w) {
    fail(layer, "cannot reach size " + std::to_string(target_h) + "x" + std::to_string(target_w) + " from input " +
                    std::to_string(in_h) + "x" + std::to_string(in_w));
  }
  a.output_padding = {oh, ow};
  return a;
}

std::vector<Shape> infer_shapes(const NetworkGraph& g, const Shape& input) {
  g.validate();
  std::vector<Shape> out(g.nodes.size());
  for (int i = 0; i < g.size(); ++i) {
    const LayerSpec& n = g.node(i);
    auto in = [&](std::size_t k) { return out[static_cast<std::size_t>(n.inputs[k])]; };
    Shape s;
    switch (n.kind) {
      case LayerKind::Input:
        if (input.c != g.input.c) fail(n, "expects " + std::to_string(g.input.c) + " channels");
        s = input;
        break;
      case LayerKind::Conv: {
        const Shape x = in(0);
        const ConvAttrs& a = n.conv;
        if (x.c != a.in_channels) fail(n, "expects " + std::to_string(a.in_channels) + " channels, got " + std::to_string(x.c));
        s = {x.n, a.out_channels, conv_out_size(x.h, a.kernel.h, a.stride.h, a.dilation.h, a.padding.h),
             conv_out_size(x.w, a.kernel.w, a.stride.w, a.dilation.w, a.padding.w)};
        break;
      }
      case LayerKind::ConvTranspose: {
        const Shape x = in(0);
        if (x.c != n.conv.in_channels) fail(n, "channel mismatch");
        ConvAttrs a = n.conv;
        if (n.size_ref >= 0) {
          const Shape t = out[static_cast<std::size_t>(n.size_ref)];
          a = resolve_transpose(n, x.h, x.w, t.h, t.w);
        }
        s = {x.n, a.out_channels,
             conv_transpose_out_size(x.h, a.kernel.h, a.stride.h, a.dilation.h, a.padding.h, a.output_padding.h),
             conv_transpose_out_size(x.w, a.kernel.w, a.stride.w, a.dilation.w, a.padding.w, a.output_padding.w)};
        break;
      }
      case LayerKind::BatchNorm:
        s = in(0);
        if (s.c != n.channels) fail(n, "channel mismatch");
        break;
      case LayerKind::Relu:
      case LayerKind::PhaseMask:
        s = in(0);
        break;
      case LayerKind::AvgPool: {
        const Shape x = in(0);
        const AvgPoolAttrs& a = n.pool;
        s = {x.n, x.c, pool_out_size(x.h, a.window.h, a.stride.h, a.dilation.h, a.pad_end.h),
             pool_out_size(x.w, a.window.w, a.stride.w, a.dilation.w, a.pad_end.w)};
        break;
      }
      case LayerKind::GlobalAvgPool:
        s = {in(0).n, in(0).c, 1, 1};
        break;
      case LayerKind::Linear: {
        const Shape x = in(0);
        if (x.c * x.h * x.w != n.conv.in_channels) fail(n, "flattened input size mismatch");
        s = {x.n, n.conv.out_channels, 1, 1};
        break;
      }
      case LayerKind::Add:
        if (!(in(0) == in(1))) fail(n, "operand shapes differ: " + to_string(in(0)) + " vs " + to_string(in(1)));
        s = in(0);
        break;
      case LayerKind::Concat: {
        const Shape a = in(0), b = in(1);
        if (a.n != b.n || a.h != b.h || a.w != b.w) fail(n, "spatial mismatch " + shape_hw(a) + " vs " + shape_hw(b));
        s = {a.n, a.c + b.c, a.h, a.w};
        break;
      }
      case LayerKind::Upsample: {
        const Shape t = out[static_cast<std::size_t>(n.size_ref < 0 ? 0 : n.size_ref)];
        s = {in(0).n, in(0).c, t.h, t.w};
        break;
      }
    }
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) fail(n, "non-positive output shape " + to_string(s));
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

std::vector<Shape> infer_shapes(const NetworkGraph& g) { return infer_shapes(g, g.input); }

std::vector<std::int64_t> count_params(const NetworkGraph& g) {
  std::vector<std::int64_t> p(g.nodes.size(), 0);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerSpec& n = g.nodes[i];
    const ConvAttrs& a = n.conv;
    switch (n.kind) {
      case LayerKind::Conv:
      case LayerKind::ConvTranspose:
        p[i] = a.kernel.h * a.kernel.w * a.in_channels * a.out_channels + (a.bias ? a.out_channels : 0);
        break;
      case LayerKind::Linear:
        p[i] = a.in_channels * a.out_channels + (a.bias ? a.out_channels : 0);
        break;
      case LayerKind::BatchNorm:
        p[i] = 2 * n.channels;
        break;
      default:
        break;
    }
  }
  return p;
}

std::int64_t total_params(const NetworkGraph& g) {
  const auto p = count_params(g);
  return std::accumulate(p.begin(), p.end(), std::int64_t{0});
}

std::vector<RFState> receptive_field(const NetworkGraph& g, const std::vector<Shape>& shapes) {
  if (shapes.size() != g.nodes.size()) throw std::invalid_argument("receptive_field: shape list size mismatch");
  std::vector<RFState> st(g.nodes.size());
  const Rational half(1, 2);
  for (int i = 0; i < g.size(); ++i) {
    const LayerSpec& n = g.node(i);
    auto in = [&](std::size_t k) { return st[static_cast<std::size_t>(n.inputs[k])]; };
    RFState r;
    switch (n.kind) {
      case LayerKind::Input:
        break;
      case LayerKind::Conv: {
        r = in(0);
        const ConvAttrs& a = n.conv;
        const Rational span((a.kernel.h - 1) * a.dilation.h);
        r.center = r.center + (span * half - Rational(a.padding.h)) * r.jump;
        r.rf = r.rf + span * r.jump;
        r.jump = r.jump * Rational(a.stride.h);
        break;
      }
      case LayerKind::ConvTranspose: {
        r = in(0);
        const ConvAttrs& a = n.conv;
        const Rational span((a.kernel.h - 1) * a.dilation.h);
        r.jump = r.jump / Rational(a.stride.h);
        r.center = r.center + (Rational(a.padding.h) - span * half) * r.jump;
        r.rf = r.rf + span * r.jump;
        break;
      }
      case LayerKind::AvgPool: {
        r = in(0);
        const AvgPoolAttrs& a = n.pool;
        const Rational span((a.window.h - 1) * a.dilation.h);
        r.center = r.center + span * half * r.jump;
        r.rf = r.rf + span * r.jump;
        r.jump = r.jump * Rational(a.stride.h);
        break;
      }
      case LayerKind::GlobalAvgPool: {
        r = in(0);
        const Shape x = shapes[static_cast<std::size_t>(n.inputs[0])];
        const Rational span(x.h - 1);
        r.center = r.center + span * half * r.jump;
        r.rf = r.rf + span * r.jump;
        r.jump = r.jump * Rational(x.h);
        break;
      }
      case LayerKind::Upsample: {
        r = in(0);
        const Shape x = shapes[static_cast<std::size_t>(n.inputs[0])];
        const Shape y = shapes[static_cast<std::size_t>(i)];
        // Half-pixel alignment: output 0 sits a quarter-step before input 0 when doubling.
        const Rational jump = r.jump * Rational(x.h, y.h);
        r.center = r.center + (jump - r.jump) * half;
        r.jump = jump;
        r.rf = r.rf + r.jump;  // two-tap interpolation reaches one more input sample
        break;
      }
      case LayerKind::Add:
      case LayerKind::Concat: {
        const RFState a = in(0), b = in(1);
        if (!(a.jump == b.jump)) fail(n, "merging fields with different jumps " + a.jump.str() + " and " + b.jump.str());
        const Rational lo = std::min(a.center - (a.rf - Rational(1)) * half, b.center - (b.rf - Rational(1)) * half);
        const Rational hi = std::max(a.center + (a.rf - Rational(1)) * half, b.center + (b.rf - Rational(1)) * half);
        r.jump = a.jump;
        r.rf = hi - lo + Rational(1);
        r.center = (lo + hi) * half;
        break;
      }
      default:  // batchnorm, relu, phase mask, linear
        r = in(0);
        break;
    }
    st[static_cast<std::size_t>(i)] = r;
  }
  return st;
}

std::vector<RFState> receptive_field(const NetworkGraph& g) { return receptive_field(g, infer_shapes(g)); }

std::vector<std::pair<std::string, Shape>> stage_trace(const NetworkGraph& g, const std::vector<Shape>& shapes) {
  std::vector<std::pair<std::string, Shape>> t;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (!g.nodes[i].stage.empty()) t.emplace_back(g.nodes[i].stage, shapes[i]);
  }
  return t;
}

int conv_path_length(const NetworkGraph& g, int from, int to, bool shortest) {
  constexpr int kNone = std::numeric_limits<int>::min();
  std::vector<int> best(g.nodes.size(), kNone);
  best[static_cast<std::size_t>(from)] = 0;
  for (int i = from + 1; i <= to; ++i) {
    const LayerSpec& n = g.node(i);
    int b = kNone;
    for (int in : n.inputs) {
      const int v = best[static_cast<std::size_t>(in)];
      if (v == kNone) continue;
      b = b == kNone ? v : (shortest ? std::min(b, v) : std::max(b, v));
    }
    if (b != kNone) best[static_cast<std::size_t>(i)] = b + (conv_like(n.kind) ? 1 : 0);
  }
  const int r = best[static_cast<std::size_t>(to)];
  return r == kNone ? -1 : r;
}

AnalysisReport analyze(const NetworkGraph& g, const Shape& input, const std::string& name) {
  AnalysisReport r;
  r.name = name;
  r.input = input;
  const auto shapes = infer_shapes(g, input);
  const auto params = count_params(g);
  const auto rf = receptive_field(g, shapes);
  for (int i = 0; i < g.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    const LayerSpec& n = g.node(i);
    NodeReport nr{i, n.name, n.kind, shapes[k], params[k], rf[k], n.group};
    if (conv_like(n.kind)) {
      nr.kernel = n.conv.kernel;
      nr.dilation = n.conv.dilation.h;
    }
    r.nodes.push_back(std::move(nr));
    r.total_params += params[k];
    if (!n.group.empty()) {
      GroupSummary& s = r.groups[n.group];
      s.params += params[k];
      if (conv_like(n.kind) && n.main_path) ++s.layers;
      s.out_shape = shapes[k];
    }
    if (conv_like(n.kind) && n.main_path) ++r.layers;
  }
  r.trace = stage_trace(g, shapes);
  r.digest = graph_digest(g);
  return r;
}

std::string millions(std::int64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(n) / 1e6);
  return buf;
}

void write_report_text(std::ostream& os, const AnalysisReport& r) {
  os << "network: " << (r.name.empty() ? "-" : r.name) << "\n";
  os << "graph digest: " << hex_digest(r.digest) << "\n";
  os << "input: " << r.input.c << "x" << r.input.h << "x" << r.input.w << "\n";
  os << "params ≈ " << millions(r.total_params) << " (" << r.total_params << ")\n";
  os << "layers: " << r.layers << " (conv + transposed conv + fully connected, main path)\n";
  os << "trace:";
  for (const auto& [stage, s] : r.trace) os << " " << s.h;
  os << "\n\nstage            output\n";
  for (const auto& [stage, s] : r.trace) {
    char line[96];
    std::snprintf(line, sizeof line, "%-16s %lldx%lldx%lld\n", stage.c_str(), static_cast<long long>(s.c),
                  static_cast<long long>(s.h), static_cast<long long>(s.w));
    os << line;
  }
  os << "\ngroup            params      layers\n";
  for (const auto& [group, s] : r.groups) {
    char line[96];
    std::snprintf(line, sizeof line, "%-16s %-11lld %d\n", group.c_str(), static_cast<long long>(s.params), s.layers);
    os << line;
  }
  bool seg_header = false;
  for (const NodeReport& n : r.nodes) {
    if (n.group != "seg" || !conv_like(n.kind)) continue;
    if (!seg_header) {
      os << "\nsegmentation head\n";
      seg_header = true;
    }
    char line[128];
    std::snprintf(line, sizeof line, "%-24s %lldx%lld dilation %lld -> %lld channels\n", n.name.c_str(),
                  static_cast<long long>(n.kernel.h), static_cast<long long>(n.kernel.w),
                  static_cast<long long>(n.dilation), static_cast<long long>(n.shape.c));
    os << line;
  }
  const NodeReport& out = r.nodes.back();
  os << "\noutput rf: " << out.rf.rf.str() << " px, jump " << out.rf.jump.str() << "\n";
}

void write_report_csv(std::ostream& os, const AnalysisReport& r, const NetworkGraph& g) {
  os << "id,name,kind,group,role,channels,height,width,params,rf,jump,stride,dilation\n";
  for (const NodeReport& n : r.nodes) {
    const LayerSpec& l = g.node(n.id);
    Index stride = 1, dilation = 1;
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::ConvTranspose) {
      stride = l.conv.stride.h;
      dilation = l.conv.dilation.h;
    } else if (l.kind == LayerKind::AvgPool) {
      stride = l.pool.stride.h;
      dilation = l.pool.dilation.h;
    }
    os << n.id << "," << n.name << "," << kind_name(n.kind) << "," << (l.group.empty() ? "-" : l.group) << ","
       << role_name(l.role) << "," << n.shape.c << "," << n.shape.h << "," << n.shape.w << "," << n.params << ","
       << n.rf.rf.str() << "," << n.rf.jump.str() << "," << stride << "," << dilation << "\n";
  }
}

}  // namespace sunet
