// suncli: command-line front end for building, converting, training and
// evaluating SUNet graphs.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "sunet/activations.hpp"
#include "sunet/analysis.hpp"
#include "sunet/arch.hpp"
#include "sunet/dataset.hpp"
#include "sunet/dilation.hpp"
#include "sunet/seg_eval.hpp"
#include "sunet/tensor_io.hpp"
#include "sunet/train.hpp"

namespace fs = std::filesystem;
using namespace sunet;

namespace {

constexpr int kValidationError = 1;
constexpr int kIoError = 2;

struct HW {
  Index h = 224;
  Index w = 224;
};

HW parse_hw(const std::string& s) {
  HW hw;
  const auto x = s.find('x');
  try {
    const std::string hs = s.substr(0, x), ws = x == std::string::npos ? hs : s.substr(x + 1);
    std::size_t used_h = 0, used_w = 0;
    hw.h = std::stoll(hs, &used_h);
    hw.w = std::stoll(ws, &used_w);
    if (used_h != hs.size() || used_w != ws.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw std::invalid_argument("size '" + s + "' is not of the form H or HxW");
  }
  if (hw.h < 1 || hw.w < 1) throw std::invalid_argument("size '" + s + "' must be positive");
  return hw;
}

struct ModelSource {
  std::string preset;
  std::string config;
  std::string graph;
  std::string input_hw = "224";

  void attach(CLI::App* cmd, bool allow_graph) {
    auto* p = cmd->add_option("--preset", preset, "Preset architecture")->check(CLI::IsMember(preset_names()));
    auto* c = cmd->add_option("--config", config, "Architecture JSON file");
    p->excludes(c);
    if (allow_graph) {
      auto* g = cmd->add_option("--graph", graph, "Graph file written by build or convert");
      g->excludes(p)->excludes(c);
    }
    cmd->add_option("--input-hw", input_hw, "Input size, H or HxW")->capture_default_str();
  }

  std::string label() const {
    if (!preset.empty()) return preset;
    if (!config.empty()) return fs::path(config).stem().string();
    return fs::path(graph).stem().string();
  }

  NetworkGraph load() const {
    if (!graph.empty()) return load_graph(graph);
    SUNetConfig cfg;
    if (!preset.empty()) {
      cfg = preset_cfg();
    } else if (!config.empty()) {
      cfg = load_config(config);
    } else {
      throw std::invalid_argument("one of --preset, --config or --graph is required");
    }
    const HW hw = parse_hw(input_hw);
    return build_classifier(cfg, hw.h, hw.w);
  }

  SUNetConfig preset_cfg() const { return sunet::preset(preset); }
};

std::string data_root_default() {
  const char* env = std::getenv("SUNET_DATA_ROOT");
  return env ? env : "";
}

fs::path under_root(const std::string& root, const std::string& p) {
  const fs::path path(p);
  return root.empty() || path.is_absolute() ? path : fs::path(root) / path;
}

void write_text_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  os << text;
  if (!os) throw IoError("write failed for '" + p.string() + "'");
}

ParamStore<float> load_weights(const NetworkGraph& g, const std::string& checkpoint, std::uint64_t init_seed) {
  if (checkpoint.empty()) {
    std::cerr << "note: no --checkpoint given, using initial weights from seed " << init_seed << "\n";
    return init_params<float>(g, init_seed);
  }
  auto ck = load_checkpoint<float>(checkpoint, graph_digest(g));
  return std::move(ck.params);
}

// ---- analyze / build / convert ------------------------------------------------

struct AnalyzeOpts {
  ModelSource src;
  std::string csv;
};

void run_analyze(const AnalyzeOpts& o) {
  const NetworkGraph g = o.src.load();
  const HW hw = parse_hw(o.src.input_hw);
  const auto report = analyze(g, {1, g.input.c, hw.h, hw.w}, o.src.label());
  write_report_text(std::cout, report);
  if (!o.csv.empty()) {
    std::ostringstream os;
    write_report_csv(os, report, g);
    write_text_file(o.csv, os.str());
  }
}

struct BuildOpts {
  ModelSource src;
  std::string out;
};

void run_build(const BuildOpts& o) {
  const NetworkGraph g = o.src.load();
  save_graph(o.out, g);
  std::cout << "wrote " << o.out << " (" << g.size() << " nodes, digest " << hex_digest(graph_digest(g)) << ")\n";
}

struct ConvertOpts {
  ModelSource src;
  SegmentationConfig seg;
  bool strided = false;
  std::string out;
  bool quiet = false;
};

void run_convert(ConvertOpts o) {
  o.seg.multigrid = !o.strided;
  const NetworkGraph g = to_segmentation(o.src.load(), o.seg);
  if (!o.out.empty()) save_graph(o.out, g);
  if (!o.quiet) {
    const HW hw = parse_hw(o.src.input_hw);
    write_report_text(std::cout, analyze(g, {1, g.input.c, hw.h, hw.w}, o.src.label() + "-os" +
                                                                           std::to_string(o.seg.output_stride)));
  }
}

// ---- train --------------------------------------------------------------------

struct TrainOpts {
  std::string graph;
  std::string manifest;
  std::string data_root = data_root_default();
  std::string out = "run";
  TrainConfig cfg;
  std::string schedule = "cosine";
  std::string crop = "512";
  bool no_nesterov = false;
  bool no_augment = false;
  std::uint64_t init_seed = 1;
  std::string init_checkpoint;
  int log_every = 50;
};

nlohmann::json describe(const TrainOpts& o) {
  const auto& c = o.cfg;
  return {{"graph", o.graph},
          {"manifest", o.manifest},
          {"iterations", c.iterations},
          {"seed", c.seed},
          {"init_seed", o.init_seed},
          {"optimizer",
           {{"lr0", c.optimizer.lr0},
            {"momentum", c.optimizer.momentum},
            {"nesterov", c.optimizer.nesterov},
            {"weight_decay", c.optimizer.weight_decay},
            {"batch_size", c.optimizer.batch_size}}},
          {"schedule",
           {{"kind", o.schedule},
            {"max_iters", c.schedule.max_iters},
            {"factor", c.schedule.factor},
            {"every_epochs", c.schedule.every_epochs},
            {"iters_per_epoch", c.schedule.iters_per_epoch}}},
          {"augmentation",
           {{"enabled", c.augment},
            {"scale", {c.augmentation.scale_min, c.augmentation.scale_max}},
            {"rotate_degrees", c.augmentation.rotate_degrees},
            {"hflip_prob", c.augmentation.hflip_prob},
            {"crop", {c.augmentation.crop_h, c.augmentation.crop_w}}}}};
}

void run_train(TrainOpts o) {
  const NetworkGraph g = load_graph(o.graph);
  const auto manifest = load_manifest(under_root(o.data_root, o.manifest));
  const auto data = load_samples<float>(manifest);

  TrainConfig& c = o.cfg;
  c.optimizer.nesterov = !o.no_nesterov;
  c.augment = !o.no_augment;
  c.ignore_index = manifest.ignore_index;
  c.augmentation.ignore_index = manifest.ignore_index;
  const HW crop = parse_hw(o.crop);
  c.augmentation.crop_h = crop.h;
  c.augmentation.crop_w = crop.w;
  if (o.schedule == "cosine") {
    c.schedule.kind = ScheduleKind::Cosine;
  } else if (o.schedule == "step") {
    c.schedule.kind = ScheduleKind::Step;
  } else {
    throw std::invalid_argument("unknown schedule '" + o.schedule + "'");
  }
  c.schedule.max_iters = std::max<std::int64_t>(c.iterations, 1);
  if (c.schedule.iters_per_epoch <= 0) {
    c.schedule.iters_per_epoch = std::max<std::int64_t>(1, static_cast<std::int64_t>(data.size()) / c.optimizer.batch_size);
  }
  const fs::path out(o.out);
  fs::create_directories(out);
  c.checkpoint_dir = out;
  write_text_file(out / "train_config.json", describe(o).dump(2) + "\n");

  const ParamStore<float> init =
      o.init_checkpoint.empty() ? init_params<float>(g, o.init_seed) : load_weights(g, o.init_checkpoint, 0);
  auto log = [&](const LossRecord& r) {
    if (o.log_every > 0 && (r.iter % o.log_every == 0 || r.iter + 1 == c.iterations)) {
      std::cerr << "iter " << r.iter << "  lr " << r.lr << "  loss " << r.loss << "\n";
    }
  };
  const auto res = train(g, init, data, c, log);
  std::ostringstream csv;
  write_loss_csv(csv, res.losses);
  write_text_file(out / "losses.csv", csv.str());
  save_checkpoint(out / "final.sunc", res.checkpoint);
  std::cout << "trained " << res.checkpoint.iteration << " iterations; wrote " << (out / "final.sunc").string() << "\n";
}

// ---- eval / infer / dump-activations ------------------------------------------

struct EvalOpts {
  std::string graph;
  std::string checkpoint;
  std::string manifest;
  std::string data_root = data_root_default();
  std::string predictions;
  std::vector<double> scales{1.0};
  bool flip = false;
  std::string csv;
  std::uint64_t init_seed = 1;
};

fs::path prediction_name(const ManifestEntry& e) { return fs::path(e.image).stem().string() + ".pgm"; }

void run_eval(const EvalOpts& o) {
  const auto manifest = load_manifest(under_root(o.data_root, o.manifest));
  manifest.validate();
  ConfusionMatrix cm(manifest.num_classes, manifest.ignore_index);
  if (!o.predictions.empty()) {
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
      const auto pred = raster_to_labels(load_pnm(fs::path(o.predictions) / prediction_name(manifest.entries[i])));
      accumulate(cm, pred, raster_to_labels(load_pnm(manifest.mask_path(i))));
    }
  } else {
    if (o.graph.empty()) throw std::invalid_argument("eval needs --graph or --predictions");
    const NetworkGraph g = load_graph(o.graph);
    const auto params = load_weights(g, o.checkpoint, o.init_seed);
    cm = evaluate_dataset(g, params, load_samples<float>(manifest), manifest.num_classes, o.scales, o.flip,
                          manifest.ignore_index);
  }
  const auto r = miou(cm);
  write_metrics_text(std::cout, r);
  if (!r.excluded.empty()) {
    std::cout << "excluded (empty union):";
    for (int c : r.excluded) std::cout << " " << c;
    std::cout << "\n";
  }
  if (!o.csv.empty()) {
    std::ostringstream os;
    write_metrics_csv(os, r);
    write_text_file(o.csv, os.str());
  }
}

struct InferOpts {
  std::string graph;
  std::string checkpoint;
  std::string manifest;
  std::string image;
  std::string data_root = data_root_default();
  std::string out = "predictions";
  std::vector<double> scales{1.0};
  bool flip = false;
  std::uint64_t init_seed = 1;
};

void run_infer(const InferOpts& o) {
  const NetworkGraph g = load_graph(o.graph);
  const auto params = load_weights(g, o.checkpoint, o.init_seed);
  std::vector<std::pair<fs::path, fs::path>> jobs;  // (input, output)
  if (!o.image.empty()) {
    jobs.emplace_back(o.image, fs::path(o.out) / (fs::path(o.image).stem().string() + ".pgm"));
  } else if (!o.manifest.empty()) {
    const auto m = load_manifest(under_root(o.data_root, o.manifest));
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      jobs.emplace_back(m.image_path(i), fs::path(o.out) / prediction_name(m.entries[i]));
    }
  } else {
    throw std::invalid_argument("infer needs --image or --manifest");
  }
  fs::create_directories(o.out);
  for (const auto& [in, dst] : jobs) {
    const auto x = raster_to_tensor<float>(load_pnm(in));
    save_pnm(dst, labels_to_raster(argmax_channels(multi_scale_inference(g, params, x, o.scales, o.flip))));
  }
  std::cout << "wrote " << jobs.size() << " prediction map(s) to " << o.out << "\n";
}

struct DumpOpts {
  std::string graph;
  std::string checkpoint;
  std::string image;
  std::string out = "activations";
  std::uint64_t init_seed = 1;
};

void run_dump(const DumpOpts& o) {
  const NetworkGraph g = load_graph(o.graph);
  const auto params = load_weights(g, o.checkpoint, o.init_seed);
  const auto d = dump_activations(g, params, raster_to_tensor<float>(load_pnm(o.image)));
  write_activation_dumps(d, o.out);
  for (const auto& l : d.levels) {
    std::cout << "level " << l.level << "  " << l.node << "  channel " << l.channel << "  " << l.map.shape().h << "x"
              << l.map.shape().w << "\n";
  }
  if (d.prediction.size() > 0) std::cout << "prediction " << d.prediction.h << "x" << d.prediction.w << "\n";
}

// ---- gen-data -----------------------------------------------------------------

struct GenOpts {
  SyntheticSpec spec;
  std::string hw = "128";
  int count = 100;
  std::string out = "synthetic";
  std::string data_root = data_root_default();
  std::string split = "train";
  std::uint64_t first = 0;
};

void run_gen(GenOpts o) {
  const HW hw = parse_hw(o.hw);
  o.spec.height = hw.h;
  o.spec.width = hw.w;
  const fs::path dir = under_root(o.data_root, o.out);
  const auto m = generate_synthetic(o.spec, o.count, dir, o.split, o.first);
  std::cout << "wrote " << m.entries.size() << " image/mask pairs and " << (dir / "manifest.json").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SUNet toolkit: architecture analysis, dilation conversion, training and evaluation"};
  app.require_subcommand(1);
  app.set_config("--settings", "", "TOML/INI file with option defaults, one [section] per command");

  AnalyzeOpts an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Print parameter, layer, shape and receptive-field report");
  an.src.attach(analyze_cmd, true);
  analyze_cmd->add_option("--csv", an.csv, "Also write the per-node table as CSV");

  BuildOpts bu;
  auto* build_cmd = app.add_subcommand("build", "Write a classifier graph file");
  bu.src.attach(build_cmd, false);
  build_cmd->add_option("-o,--out", bu.out, "Output graph file")->required();

  ConvertOpts cv;
  auto* convert_cmd = app.add_subcommand("convert", "Turn a classifier into a dilated segmentation network");
  cv.src.attach(convert_cmd, true);
  convert_cmd->add_option("--output-stride", cv.seg.output_stride, "8, 16 or 32")
      ->check(CLI::IsMember({8, 16, 32}))
      ->capture_default_str();
  auto* mg = convert_cmd->add_flag("--multigrid", "Multigrid dilations inside modules (default)");
  convert_cmd->add_flag("--strided", cv.strided, "Keep strided convolutions inside modules")->excludes(mg);
  convert_cmd->add_flag("--degridding", cv.seg.degridding, "Append two de-gridding convolutions");
  convert_cmd->add_option("--classes", cv.seg.num_classes, "Number of classes")->capture_default_str();
  convert_cmd->add_option("-o,--out", cv.out, "Output graph file");
  convert_cmd->add_flag("-q,--quiet", cv.quiet, "Skip the analysis report");

  TrainOpts tr;
  auto* train_cmd = app.add_subcommand("train", "Train a segmentation graph on a manifest");
  train_cmd->add_option("--graph", tr.graph, "Segmentation graph file")->required();
  train_cmd->add_option("--manifest", tr.manifest, "Dataset manifest")->required();
  train_cmd->add_option("--data-root", tr.data_root, "Base for relative data paths (env SUNET_DATA_ROOT)");
  train_cmd->add_option("--out", tr.out, "Run directory")->capture_default_str();
  train_cmd->add_option("--iters", tr.cfg.iterations, "Iterations")->required();
  train_cmd->add_option("--batch", tr.cfg.optimizer.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--lr", tr.cfg.optimizer.lr0, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--momentum", tr.cfg.optimizer.momentum, "Momentum")->capture_default_str();
  train_cmd->add_option("--weight-decay", tr.cfg.optimizer.weight_decay, "Weight decay")->capture_default_str();
  train_cmd->add_flag("--no-nesterov", tr.no_nesterov, "Classical momentum");
  train_cmd->add_option("--schedule", tr.schedule, "cosine or step")->capture_default_str();
  train_cmd->add_option("--step-factor", tr.cfg.schedule.factor, "Step schedule factor")->capture_default_str();
  train_cmd->add_option("--step-every", tr.cfg.schedule.every_epochs, "Step schedule period in epochs");
  train_cmd->add_option("--iters-per-epoch", tr.cfg.schedule.iters_per_epoch, "Defaults to dataset size / batch")
      ->default_val(0);
  train_cmd->add_option("--crop", tr.crop, "Crop size, H or HxW")->capture_default_str();
  train_cmd->add_option("--scale-min", tr.cfg.augmentation.scale_min)->capture_default_str();
  train_cmd->add_option("--scale-max", tr.cfg.augmentation.scale_max)->capture_default_str();
  train_cmd->add_option("--rotate", tr.cfg.augmentation.rotate_degrees, "Max rotation in degrees")->capture_default_str();
  train_cmd->add_option("--hflip", tr.cfg.augmentation.hflip_prob, "Mirror probability")->capture_default_str();
  train_cmd->add_flag("--no-augment", tr.no_augment, "Use samples as stored");
  train_cmd->add_option("--seed", tr.cfg.seed, "Master seed for sampling and augmentation")->capture_default_str();
  train_cmd->add_option("--init-seed", tr.init_seed, "Seed for weight initialization")->capture_default_str();
  train_cmd->add_option("--init-checkpoint", tr.init_checkpoint, "Start from these weights");
  train_cmd->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "Write ckpt_<iter>.sunc every N iterations");
  train_cmd->add_flag("--eval-bn", [&tr](std::int64_t) { tr.cfg.batchnorm_train = false; },
                      "Keep batch norm in eval mode");
  train_cmd->add_option("--log-every", tr.log_every, "Progress interval on stderr")->capture_default_str();

  EvalOpts ev;
  auto* eval_cmd = app.add_subcommand("eval", "Compute mIoU over a manifest");
  eval_cmd->add_option("--graph", ev.graph, "Segmentation graph file");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Weights");
  eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--data-root", ev.data_root, "Base for relative data paths (env SUNET_DATA_ROOT)");
  eval_cmd->add_option("--predictions", ev.predictions, "Score stored prediction maps instead of running a network");
  eval_cmd->add_option("--scales", ev.scales, "Input scales, comma separated")->delimiter(',');
  eval_cmd->add_flag("--flip", ev.flip, "Also average mirrored inputs");
  eval_cmd->add_option("--csv", ev.csv, "Write per-class IoU as CSV");
  eval_cmd->add_option("--init-seed", ev.init_seed, "Seed when no checkpoint is given");

  InferOpts in;
  auto* infer_cmd = app.add_subcommand("infer", "Write prediction maps");
  infer_cmd->add_option("--graph", in.graph, "Segmentation graph file")->required();
  infer_cmd->add_option("--checkpoint", in.checkpoint, "Weights");
  auto* img = infer_cmd->add_option("--image", in.image, "Single PPM image");
  infer_cmd->add_option("--manifest", in.manifest, "Dataset manifest")->excludes(img);
  infer_cmd->add_option("--data-root", in.data_root, "Base for relative data paths (env SUNET_DATA_ROOT)");
  infer_cmd->add_option("--out", in.out, "Output directory")->capture_default_str();
  infer_cmd->add_option("--scales", in.scales, "Input scales, comma separated")->delimiter(',');
  infer_cmd->add_flag("--flip", in.flip, "Also average mirrored inputs");
  infer_cmd->add_option("--init-seed", in.init_seed, "Seed when no checkpoint is given");

  DumpOpts du;
  auto* dump_cmd = app.add_subcommand("dump-activations", "Per-level strongest activation maps");
  dump_cmd->add_option("--graph", du.graph, "Graph file")->required();
  dump_cmd->add_option("--checkpoint", du.checkpoint, "Weights");
  dump_cmd->add_option("--image", du.image, "PPM image")->required();
  dump_cmd->add_option("--out", du.out, "Output directory")->capture_default_str();
  dump_cmd->add_option("--init-seed", du.init_seed, "Seed when no checkpoint is given");

  GenOpts ge;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen_cmd->add_option("--out", ge.out, "Output directory")->capture_default_str();
  gen_cmd->add_option("--data-root", ge.data_root, "Base for a relative --out (env SUNET_DATA_ROOT)");
  gen_cmd->add_option("--count", ge.count, "Number of images")->capture_default_str();
  gen_cmd->add_option("--first", ge.first, "Index of the first image")->capture_default_str();
  gen_cmd->add_option("--hw", ge.hw, "Canvas size, H or HxW")->capture_default_str();
  gen_cmd->add_option("--classes", ge.spec.num_classes, "Background plus shape classes")->capture_default_str();
  gen_cmd->add_option("--min-shapes", ge.spec.min_shapes)->capture_default_str();
  gen_cmd->add_option("--max-shapes", ge.spec.max_shapes)->capture_default_str();
  gen_cmd->add_option("--min-extent", ge.spec.min_extent)->capture_default_str();
  gen_cmd->add_option("--max-extent", ge.spec.max_extent)->capture_default_str();
  gen_cmd->add_option("--noise", ge.spec.noise)->capture_default_str();
  gen_cmd->add_flag("!--no-rectangles", ge.spec.rectangles, "Only disks");
  gen_cmd->add_flag("!--no-disks", ge.spec.disks, "Only rectangles");
  gen_cmd->add_option("--seed", ge.spec.seed)->capture_default_str();
  gen_cmd->add_option("--split", ge.split)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidationError;
  }

  try {
    if (*analyze_cmd) run_analyze(an);
    if (*build_cmd) run_build(bu);
    if (*convert_cmd) run_convert(cv);
    if (*train_cmd) run_train(tr);
    if (*eval_cmd) run_eval(ev);
    if (*infer_cmd) run_infer(in);
    if (*dump_cmd) run_dump(du);
    if (*gen_cmd) run_gen(ge);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  }
  return 0;
}
