#include "sunet/graph.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include "sunet/tensor_io.hpp"

namespace sunet {

namespace {

constexpr std::array<std::pair<LayerKind, const char*>, 12> kKinds{{
    {LayerKind::Input, "input"},
    {LayerKind::Conv, "conv"},
    {LayerKind::ConvTranspose, "conv_transpose"},
    {LayerKind::BatchNorm, "batchnorm"},
    {LayerKind::Relu, "relu"},
    {LayerKind::AvgPool, "avg_pool"},
    {LayerKind::GlobalAvgPool, "global_avg_pool"},
    {LayerKind::Linear, "linear"},
    {LayerKind::Add, "add"},
    {LayerKind::Concat, "concat"},
    {LayerKind::PhaseMask, "phase_mask"},
    {LayerKind::Upsample, "upsample"},
}};

constexpr std::array<std::pair<UNetRole, const char*>, 12> kRoles{{
    {UNetRole::None, "none"},
    {UNetRole::BottleneckIn, "bottleneck_in"},
    {UNetRole::E1a, "E1a"},
    {UNetRole::E1b, "E1b"},
    {UNetRole::E2a, "E2a"},
    {UNetRole::E2b, "E2b"},
    {UNetRole::D2a, "D2a"},
    {UNetRole::D2b, "D2b"},
    {UNetRole::D1a, "D1a"},
    {UNetRole::D1b, "D1b"},
    {UNetRole::BottleneckOut, "bottleneck_out"},
    {UNetRole::Expansion, "expansion"},
}};

int arity(LayerKind k) {
  switch (k) {
    case LayerKind::Input:
      return 0;
    case LayerKind::Add:
    case LayerKind::Concat:
      return 2;
    default:
      return 1;
  }
}

std::string pair_text(const Pair& p) { return std::to_string(p.h) + "x" + std::to_string(p.w); }

Pair parse_pair(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw FormatError("graph: bad pair '" + s + "'");
  return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
}

std::string text_or_dash(const std::string& s) { return s.empty() ? "-" : s; }
std::string dash_to_empty(const std::string& s) { return s == "-" ? std::string() : s; }

std::string body_text(const NetworkGraph& g) {
  std::ostringstream os;
  os << "sunet-graph 1\n";
  os << "input c=" << g.input.c << " h=" << g.input.h << " w=" << g.input.w << "\n";
  os << "output " << g.output << "\n";
  os << "nodes " << g.nodes.size() << "\n";
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const LayerSpec& n = g.nodes[i];
    std::string ins;
    for (std::size_t j = 0; j < n.inputs.size(); ++j) ins += (j ? "," : "") + std::to_string(n.inputs[j]);
    os << "node " << i << " name=" << n.name << " kind=" << kind_name(n.kind) << " in=" << text_or_dash(ins)
       << " k=" << pair_text(n.conv.kernel) << " s=" << pair_text(n.conv.stride)
       << " d=" << pair_text(n.conv.dilation) << " p=" << pair_text(n.conv.padding)
       << " op=" << pair_text(n.conv.output_padding) << " cin=" << n.conv.in_channels
       << " cout=" << n.conv.out_channels << " bias=" << int(n.conv.bias) << " pw=" << pair_text(n.pool.window)
       << " ps=" << pair_text(n.pool.stride) << " pd=" << pair_text(n.pool.dilation)
       << " pe=" << pair_text(n.pool.pad_end) << " ch=" << n.channels << " period=" << n.period
       << " ref=" << n.size_ref << " group=" << text_or_dash(n.group) << " module=" << n.module
       << " role=" << role_name(n.role) << " grid=" << n.grid_factor << " sorig=" << n.stride_orig
       << " level=" << n.level << " stage=" << text_or_dash(n.stage) << " main=" << int(n.main_path) << "\n";
  }
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

const char* kind_name(LayerKind k) {
  for (const auto& [kind, name] : kKinds)
    if (kind == k) return name;
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  for (const auto& [kind, name] : kKinds)
    if (s == name) return kind;
  throw FormatError("graph: unknown layer kind '" + s + "'");
}

const char* role_name(UNetRole r) {
  for (const auto& [role, name] : kRoles)
    if (role == r) return name;
  return "?";
}

UNetRole parse_role(const std::string& s) {
  for (const auto& [role, name] : kRoles)
    if (s == name) return role;
  throw FormatError("graph: unknown role '" + s + "'");
}

int NetworkGraph::add(LayerSpec spec) {
  for (int in : spec.inputs) {
    if (in < 0 || in >= size()) throw ShapeError("graph: node '" + spec.name + "' refers to unknown input");
  }
  nodes.push_back(std::move(spec));
  output = size() - 1;
  return output;
}

int NetworkGraph::find(const std::string& name) const {
  for (int i = 0; i < size(); ++i)
    if (nodes[static_cast<std::size_t>(i)].name == name) return i;
  return -1;
}

void NetworkGraph::validate() const {
  if (nodes.empty()) throw ShapeError("graph: empty");
  if (output < 0 || output >= size()) throw ShapeError("graph: output index out of range");
  std::vector<int> consumers(nodes.size(), 0);
  std::map<std::string, int> names;
  for (int i = 0; i < size(); ++i) {
    const LayerSpec& n = node(i);
    if (!names.emplace(n.name, i).second) throw ShapeError("graph: duplicate node name '" + n.name + "'");
    if (static_cast<int>(n.inputs.size()) != arity(n.kind)) {
      throw ShapeError("graph: node '" + n.name + "' has wrong number of inputs");
    }
    if (n.kind == LayerKind::Input && i != 0) throw ShapeError("graph: input must be node 0");
    for (int in : n.inputs) {
      if (in < 0 || in >= i) throw ShapeError("graph: node '" + n.name + "' breaks topological order");
      ++consumers[static_cast<std::size_t>(in)];
    }
    if (n.kind == LayerKind::Conv || n.kind == LayerKind::ConvTranspose) n.conv.validate();
    if (n.kind == LayerKind::AvgPool) n.pool.validate();
    if (n.kind == LayerKind::PhaseMask && n.period < 1) throw ShapeError("graph: phase mask period < 1");
    if (n.size_ref >= i) throw ShapeError("graph: node '" + n.name + "' size reference is not upstream");
  }
  if (node(0).kind != LayerKind::Input) throw ShapeError("graph: node 0 must be the input");
  for (int i = 0; i < size(); ++i) {
    if (consumers[static_cast<std::size_t>(i)] == 0 && i != output) {
      throw ShapeError("graph: node '" + node(i).name + "' is a dangling output");
    }
  }
}

int add_input(NetworkGraph& g, Index channels, Index h, Index w) {
  g.input = Shape{1, channels, h, w};
  LayerSpec s;
  s.name = "input";
  s.kind = LayerKind::Input;
  s.channels = channels;
  s.main_path = false;
  return g.add(std::move(s));
}

int add_conv(NetworkGraph& g, const std::string& name, int in, Index cin, Index cout, Index k, Index stride,
             Index dilation, bool bias) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::Conv;
  s.inputs = {in};
  s.conv.kernel = {k, k};
  s.conv.stride = {stride, stride};
  s.conv.dilation = {dilation, dilation};
  s.conv.padding = {same_padding(k, dilation), same_padding(k, dilation)};
  s.conv.in_channels = cin;
  s.conv.out_channels = cout;
  s.conv.bias = bias;
  s.stride_orig = stride;
  return g.add(std::move(s));
}

int add_conv_transpose(NetworkGraph& g, const std::string& name, int in, Index cin, Index cout, Index k,
                       Index stride, Index dilation, int size_ref) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::ConvTranspose;
  s.inputs = {in};
  s.conv.kernel = {k, k};
  s.conv.stride = {stride, stride};
  s.conv.dilation = {dilation, dilation};
  s.conv.padding = {same_padding(k, dilation), same_padding(k, dilation)};
  s.conv.output_padding = {stride - 1, stride - 1};
  s.conv.in_channels = cin;
  s.conv.out_channels = cout;
  s.size_ref = size_ref;
  s.stride_orig = stride;
  return g.add(std::move(s));
}

int add_bn(NetworkGraph& g, const std::string& name, int in, Index channels) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::BatchNorm;
  s.inputs = {in};
  s.channels = channels;
  s.main_path = false;
  return g.add(std::move(s));
}

int add_relu(NetworkGraph& g, const std::string& name, int in) {
  LayerSpec s;
  s.name = name;
  s.kind = LayerKind::Relu;
  s.inputs = {in};
  s.main_path = false;
  return g.add(std::move(s));
}

int add_binary(NetworkGraph& g, LayerKind kind, const std::string& name, int a, int b) {
  LayerSpec s;
  s.name = name;
  s.kind = kind;
  s.inputs = {a, b};
  s.main_path = false;
  return g.add(std::move(s));
}

void write_graph(std::ostream& os, const NetworkGraph& g) {
  const std::string body = body_text(g);
  os << body << "digest " << hex_digest(fnv1a(body)) << "\n";
}

std::string graph_to_string(const NetworkGraph& g) {
  std::ostringstream os;
  write_graph(os, g);
  return os.str();
}

NetworkGraph read_graph(std::istream& is) {
  NetworkGraph g;
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(is, line)) throw FormatError(std::string("graph: missing ") + what);
    return line;
  };
  if (next("header") != "sunet-graph 1") throw FormatError("graph: bad header '" + line + "'");
  {
    std::istringstream ls(next("input line"));
    std::string tag, c, h, w;
    ls >> tag >> c >> h >> w;
    if (tag != "input" || c.rfind("c=", 0) != 0 || h.rfind("h=", 0) != 0 || w.rfind("w=", 0) != 0) {
      throw FormatError("graph: bad input line");
    }
    g.input = Shape{1, std::stoll(c.substr(2)), std::stoll(h.substr(2)), std::stoll(w.substr(2))};
  }
  int output = -1;
  {
    std::istringstream ls(next("output line"));
    std::string tag;
    if (!(ls >> tag >> output) || tag != "output") throw FormatError("graph: bad output line");
  }
  std::size_t count = 0;
  {
    std::istringstream ls(next("node count"));
    std::string tag;
    if (!(ls >> tag >> count) || tag != "nodes") throw FormatError("graph: bad node count");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(next("node"));
    std::string tag;
    std::size_t id = 0;
    if (!(ls >> tag >> id) || tag != "node" || id != i) throw FormatError("graph: bad node line " + line);
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError("graph: bad attribute '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto get = [&](const char* key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end()) throw FormatError(std::string("graph: node missing attribute ") + key);
      return it->second;
    };
    try {
      LayerSpec n;
      n.name = get("name");
      n.kind = parse_kind(get("kind"));
      const std::string ins = dash_to_empty(get("in"));
      std::stringstream ss(ins);
      std::string part;
      while (std::getline(ss, part, ',')) n.inputs.push_back(std::stoi(part));
      n.conv.kernel = parse_pair(get("k"));
      n.conv.stride = parse_pair(get("s"));
      n.conv.dilation = parse_pair(get("d"));
      n.conv.padding = parse_pair(get("p"));
      n.conv.output_padding = parse_pair(get("op"));
      n.conv.in_channels = std::stoll(get("cin"));
      n.conv.out_channels = std::stoll(get("cout"));
      n.conv.bias = get("bias") == "1";
      n.pool.window = parse_pair(get("pw"));
      n.pool.stride = parse_pair(get("ps"));
      n.pool.dilation = parse_pair(get("pd"));
      n.pool.pad_end = parse_pair(get("pe"));
      n.channels = std::stoll(get("ch"));
      n.period = std::stoll(get("period"));
      n.size_ref = std::stoi(get("ref"));
      n.group = dash_to_empty(get("group"));
      n.module = std::stoi(get("module"));
      n.role = parse_role(get("role"));
      n.grid_factor = std::stoi(get("grid"));
      n.stride_orig = std::stoll(get("sorig"));
      n.level = std::stoi(get("level"));
      n.stage = dash_to_empty(get("stage"));
      n.main_path = get("main") == "1";
      g.add(std::move(n));
    } catch (const std::logic_error& e) {  // stoi/stoll failures
      throw FormatError(std::string("graph: malformed node ") + std::to_string(i) + ": " + e.what());
    } catch (const ShapeError& e) {
      throw FormatError(std::string("graph: ") + e.what());
    }
  }
  g.output = output;
  std::istringstream ls(next("digest"));
  std::string tag, hex;
  ls >> tag >> hex;
  if (tag != "digest") throw FormatError("graph: missing digest line");
  if (hex != hex_digest(fnv1a(body_text(g)))) throw FormatError("graph: digest mismatch");
  try {
    g.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("graph: ") + e.what());
  }
  return g;
}

void save_graph(const std::filesystem::path& p, const NetworkGraph& g) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write graph file " + p.string());
  write_graph(os, g);
  if (!os) throw IoError("failed writing graph file " + p.string());
}

NetworkGraph load_graph(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open graph file " + p.string());
  return read_graph(is);
}

std::uint64_t graph_digest(const NetworkGraph& g) { return fnv1a(body_text(g)); }

std::string hex_digest(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

}  // namespace sunet
