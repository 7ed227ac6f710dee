#include "sunet/arch.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "sunet/unet_module.hpp"

namespace sunet {

using nlohmann::json;

void SUNetConfig::validate() const {
  if (in_channels < 1 || stem_channels < 1 || stem_out < 1) throw std::invalid_argument("config: stem widths must be positive");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockSpec& s = blocks[b];
    const std::string where = "config: block " + std::to_string(b + 1);
    if (s.modules < 1) throw std::invalid_argument(where + " needs at least one module");
    if (s.width < 1 || s.out_channels < 1) throw std::invalid_argument(where + " widths must be positive");
  }
  if (!blocks[3].trimmed) throw std::invalid_argument("config: block 4 must use trimmed modules");
  if (head == HeadKind::Classification && num_classes < 1) throw std::invalid_argument("config: num_classes < 1");
}

std::vector<std::string> preset_names() { return {"sunet64", "sunet128", "sunet7_128"}; }

SUNetConfig preset(const std::string& name) {
  SUNetConfig c;
  c.name = name;
  if (name == "sunet64") {
    c.blocks = {{{2, 64, 256, false}, {4, 64, 512, false}, {4, 64, 768, false}, {1, 64, 1024, true}}};
  } else if (name == "sunet128") {
    c.blocks = {{{2, 128, 512, false}, {4, 128, 1024, false}, {4, 128, 1536, false}, {1, 128, 2048, true}}};
  } else if (name == "sunet7_128") {
    c.blocks = {{{2, 128, 512, false}, {7, 128, 1280, false}, {7, 128, 2048, false}, {1, 128, 2304, true}}};
  } else {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return c;
}

std::string config_to_json(const SUNetConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["in_channels"] = cfg.in_channels;
  j["stem"] = {{"channels", cfg.stem_channels}, {"out", cfg.stem_out}};
  j["blocks"] = json::array();
  for (const auto& b : cfg.blocks) {
    j["blocks"].push_back({{"modules", b.modules}, {"width", b.width}, {"out", b.out_channels}, {"trimmed", b.trimmed}});
  }
  j["head"] = {{"kind", cfg.head == HeadKind::Classification ? "classification" : "none"},
               {"classes", cfg.num_classes}};
  return j.dump(2) + "\n";
}

SUNetConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  try {
    SUNetConfig c = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : SUNetConfig{};
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<Index>();
    if (j.contains("stem")) {
      const json& s = j.at("stem");
      if (s.contains("channels")) c.stem_channels = s.at("channels").get<Index>();
      if (s.contains("out")) c.stem_out = s.at("out").get<Index>();
    }
    if (j.contains("blocks")) {
      const json& bl = j.at("blocks");
      if (!bl.is_array() || bl.size() != 4) throw std::invalid_argument("config: 'blocks' must list exactly 4 blocks");
      for (std::size_t i = 0; i < 4; ++i) {
        const json& b = bl[i];
        c.blocks[i].modules = b.at("modules").get<int>();
        c.blocks[i].width = b.at("width").get<Index>();
        c.blocks[i].out_channels = b.at("out").get<Index>();
        c.blocks[i].trimmed = b.value("trimmed", i == 3);
      }
    }
    if (j.contains("head")) {
      const json& h = j.at("head");
      const std::string kind = h.value("kind", "classification");
      if (kind == "classification") {
        c.head = HeadKind::Classification;
      } else if (kind == "none") {
        c.head = HeadKind::None;
      } else {
        throw std::invalid_argument("config: unknown head kind '" + kind + "'");
      }
      c.num_classes = h.value("classes", c.num_classes);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

SUNetConfig load_config(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open config " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json(ss.str());
}

NetworkGraph build_classifier(const SUNetConfig& cfg, Index input_h, Index input_w) {
  cfg.validate();
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0) {
    throw std::invalid_argument("build_classifier: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                                " is not divisible by 32");
  }
  NetworkGraph g;
  const int in = add_input(g, cfg.in_channels, input_h, input_w);

  auto set_group = [&g](int id, const std::string& group) {
    g.node(id).group = group;
    return id;
  };

  // Stem: 7×7 stride-2 conv, then a residual block whose first conv strides.
  const int stem = set_group(add_conv(g, "stem/conv", in, cfg.in_channels, cfg.stem_channels, 7, 2, 1), "stem");
  g.node(stem).stage = "stem_conv";
  int x = set_group(add_bn(g, "stem/res_a/bn", stem, cfg.stem_channels), "stem");
  x = set_group(add_relu(g, "stem/res_a/relu", x), "stem");
  x = set_group(add_conv(g, "stem/res_a/conv", x, cfg.stem_channels, cfg.stem_out, 3, 2, 1), "stem");
  x = set_group(add_bn(g, "stem/res_b/bn", x, cfg.stem_out), "stem");
  x = set_group(add_relu(g, "stem/res_b/relu", x), "stem");
  x = set_group(add_conv(g, "stem/res_b/conv", x, cfg.stem_out, cfg.stem_out, 3, 1, 1), "stem");
  const int proj = set_group(add_conv(g, "stem/proj/conv", stem, cfg.stem_channels, cfg.stem_out, 1, 2, 1), "stem");
  g.node(proj).main_path = false;
  int cur = set_group(add_binary(g, LayerKind::Add, "stem/add", proj, x), "stem");
  g.node(cur).level = 1;
  g.node(cur).stage = "stem_block";

  Index channels = cfg.stem_out;
  for (int b = 0; b < 4; ++b) {
    const std::string block = "block" + std::to_string(b + 1);
    if (b > 0) {
      const std::string tr = "transition" + std::to_string(b + 1);
      LayerSpec pool;
      pool.name = tr + "/pool";
      pool.kind = LayerKind::AvgPool;
      pool.inputs = {cur};
      pool.group = tr;
      pool.stage = tr;
      pool.main_path = false;
      cur = g.add(std::move(pool));
    }
    const BlockSpec& bs = cfg.blocks[static_cast<std::size_t>(b)];
    for (int m = 0; m < bs.modules; ++m) {
      UNetModuleSpec ms;
      ms.in_channels = channels;
      ms.width = bs.width;
      ms.out_channels = bs.out_channels;
      ms.trimmed = bs.trimmed;
      ms.skip = m == 0 ? SkipKind::Expansion : SkipKind::Identity;
      cur = append_unet_module(g, cur, ms, block + "/m" + std::to_string(m), block, m);
      channels = bs.out_channels;
    }
    g.node(cur).level = b + 2;
    g.node(cur).stage = block;
  }

  x = set_group(add_bn(g, "head/bn", cur, channels), "head");
  x = set_group(add_relu(g, "head/relu", x), "head");
  if (cfg.head == HeadKind::Classification) {
    LayerSpec gap;
    gap.name = "head/gap";
    gap.kind = LayerKind::GlobalAvgPool;
    gap.inputs = {x};
    gap.group = "head";
    gap.stage = "gap";
    gap.main_path = false;
    x = g.add(std::move(gap));
    LayerSpec fc;
    fc.name = "head/fc";
    fc.kind = LayerKind::Linear;
    fc.inputs = {x};
    fc.group = "head";
    fc.conv.kernel = {1, 1};
    fc.conv.in_channels = channels;
    fc.conv.out_channels = cfg.num_classes;
    fc.conv.bias = true;
    g.add(std::move(fc));
  }
  g.validate();
  return g;
}

int count_layers(const NetworkGraph& g) {
  int n = 0;
  for (const auto& l : g.nodes) {
    const bool weighted =
        l.kind == LayerKind::Conv || l.kind == LayerKind::ConvTranspose || l.kind == LayerKind::Linear;
    if (weighted && l.main_path) ++n;
  }
  return n;
}

}  // namespace sunet
