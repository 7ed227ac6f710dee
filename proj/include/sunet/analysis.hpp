#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sunet/graph.hpp"

namespace sunet {

/// Exact fraction with a positive denominator, always in lowest terms.
class Rational {
 public:
  Rational(std::int64_t num = 0, std::int64_t den = 1);
  std::int64_t num() const { return num_; }
  std::int64_t den() const { return den_; }
  bool is_integer() const { return den_ == 1; }
  double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }
  std::string str() const;

  friend Rational operator+(Rational a, Rational b);
  friend Rational operator-(Rational a, Rational b);
  friend Rational operator*(Rational a, Rational b);
  friend Rational operator/(Rational a, Rational b);
  friend bool operator==(const Rational& a, const Rational& b) = default;
  friend bool operator<(const Rational& a, const Rational& b);

 private:
  std::int64_t num_;
  std::int64_t den_;
};

/// Receptive field of one node, measured in input pixels.
struct RFState {
  Rational rf{1};      // extent
  Rational jump{1};    // distance between adjacent output samples
  Rational center{0};  // centre of the first output's field
};

/// Transposed convolutions resolve output_padding against their size
/// reference; this returns the attributes actually applied. Throws ShapeError
/// when no output_padding in [0, stride) reaches the target.
ConvAttrs resolve_transpose(const LayerSpec& layer, Index in_h, Index in_w, Index target_h, Index target_w);

/// Per-node output shapes for an input of shape `input` (n = batch).
std::vector<Shape> infer_shapes(const NetworkGraph& g, const Shape& input);
std::vector<Shape> infer_shapes(const NetworkGraph& g);

/// Trainable parameter elements per node: weights, biases, BN gamma and beta.
/// Running statistics are buffers and are not counted.
std::vector<std::int64_t> count_params(const NetworkGraph& g);
std::int64_t total_params(const NetworkGraph& g);

/// Forward recurrence rf' = rf + (k−1)·d·jump, jump' = jump·s; transposed
/// layers divide the jump before growing the field. Merges take the union of
/// the incoming fields. `shapes` are needed by global pooling and resizing.
std::vector<RFState> receptive_field(const NetworkGraph& g, const std::vector<Shape>& shapes);
std::vector<RFState> receptive_field(const NetworkGraph& g);

/// Output extents of the nodes carrying a stage label, in graph order.
std::vector<std::pair<std::string, Shape>> stage_trace(const NetworkGraph& g, const std::vector<Shape>& shapes);

/// Number of conv-like layers (conv, transposed conv, linear) a gradient
/// passes through on its way from `to` back to the output of `from`; `from`
/// itself is not counted. Longest path by default, shortest
/// when `shortest` is set; -1 when `to` is unreachable.
int conv_path_length(const NetworkGraph& g, int from, int to, bool shortest);

struct NodeReport {
  int id = 0;
  std::string name;
  LayerKind kind = LayerKind::Input;
  Shape shape;
  std::int64_t params = 0;
  RFState rf;
  std::string group;
  Pair kernel{1, 1};  // conv-like layers only
  Index dilation = 1;
};

struct GroupSummary {
  std::int64_t params = 0;
  int layers = 0;
  Shape out_shape;
};

struct AnalysisReport {
  std::string name;
  Shape input;
  std::vector<NodeReport> nodes;
  std::int64_t total_params = 0;
  int layers = 0;
  std::vector<std::pair<std::string, Shape>> trace;
  std::map<std::string, GroupSummary> groups;
  std::uint64_t digest = 0;
};

AnalysisReport analyze(const NetworkGraph& g, const Shape& input, const std::string& name = "");

/// "6.9M"-style rendering with one decimal.
std::string millions(std::int64_t n);

void write_report_text(std::ostream& os, const AnalysisReport& r);
/// Header: id,name,kind,group,role,channels,height,width,params,rf,jump,stride,dilation
void write_report_csv(std::ostream& os, const AnalysisReport& r, const NetworkGraph& g);

}  // namespace sunet
