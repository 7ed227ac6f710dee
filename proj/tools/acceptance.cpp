// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. `--only 1,4,9` restricts the run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sunet/analysis.hpp"
#include "sunet/arch.hpp"
#include "sunet/dataset.hpp"
#include "sunet/dilation.hpp"
#include "sunet/executor.hpp"
#include "sunet/op_catalog.hpp"
#include "sunet/seg_eval.hpp"
#include "sunet/train.hpp"
#include "sunet/unet_module.hpp"

using namespace sunet;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string join(const std::vector<Index>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

// ---------------------------------------------------------------- 1 to 3

Outcome parameter_counts() {
  const std::pair<const char*, double> want[] = {{"sunet64", 6.9e6}, {"sunet128", 24.6e6}, {"sunet7_128", 37.7e6}};
  Outcome o{true, ""};
  for (const auto& [name, target] : want) {
    const double got = static_cast<double>(total_params(build_classifier(preset(name), 224, 224)));
    const double rel = (got - target) / target;
    o.pass = o.pass && std::abs(rel) <= 0.05;
    o.detail += fmt("%s %.0f (%+.2f%%) ", name, got, 100.0 * rel);
  }
  return o;
}

Outcome shape_trace() {
  const std::vector<Index> rows = {112, 56, 56, 28, 28, 14, 14, 7, 7, 1};
  const std::vector<Index> stages = {112, 56, 56, 28, 28, 14, 14, 7, 1};
  Outcome o{true, ""};
  for (const char* name : {"sunet64", "sunet128", "sunet7_128"}) {
    const auto g = build_classifier(preset(name), 224, 224);
    std::vector<Index> got;
    std::vector<std::string> labels;
    for (const auto& [stage, s] : stage_trace(g, infer_shapes(g))) {
      if (s.h != s.w) o.pass = false;
      got.push_back(s.h);
      labels.push_back(stage);
    }
    // Transition 4 and block 4 share one 7x7 stage.
    std::vector<Index> merged;
    for (std::size_t i = 0; i < got.size(); ++i)
      if (!(labels[i].starts_with("transition4") && i + 1 < got.size() && got[i + 1] == got[i])) merged.push_back(got[i]);
    o.pass = o.pass && got == rows && merged == stages;
    if (got != rows || merged != stages) o.detail += fmt("%s: %s; ", name, join(got).c_str());
  }
  if (o.pass) o.detail = "rows " + join(rows) + ", stages " + join(stages);
  return o;
}

Outcome layer_counts() {
  const std::pair<const char*, int> want[] = {{"sunet64", 110}, {"sunet128", 110}, {"sunet7_128", 170}};
  Outcome o{true, ""};
  for (const auto& [name, n] : want) {
    const int got = count_layers(build_classifier(preset(name), 224, 224));
    o.pass = o.pass && std::abs(got - n) <= 1;
    o.detail += fmt("%s %d/%d ", name, got, n);
  }
  return o;
}

// ---------------------------------------------------------------- 4

int conv_with_role(const NetworkGraph& g, UNetRole role) {
  for (int i = 0; i < g.size(); ++i)
    if (g.node(i).role == role && g.node(i).kind == LayerKind::Conv) return i;
  return -1;
}

Outcome field_of_view() {
  UNetModuleSpec spec;
  spec.in_channels = 2;
  spec.width = 2;
  spec.out_channels = 2;
  const Index hw = 64;
  const auto g = build_unet_module(spec, hw, hw);
  const int e2b = conv_with_role(g, UNetRole::E2b);
  const Rational analytic = receptive_field(g)[static_cast<std::size_t>(e2b)].rf;

  // Positive weights and a positive input: every path contributes with the
  // same sign, so the nonzero gradient footprint is the exact field.
  auto p = constant_params<double>(g, 0.1);
  const Tensor<double> x({1, 2, hw, hw}, 1.0);
  const auto fwd = forward(g, p, x, Phase::Eval, e2b);
  Tensor<double> seed(fwd.output().shape());
  const Index cy = fwd.output().shape().h / 2, cx = fwd.output().shape().w / 2;
  seed(0, 0, cy, cx) = 1.0;
  const auto grads = backward(g, p, fwd, e2b, seed);
  Index lo_x = hw, hi_x = -1, lo_y = hw, hi_y = -1;
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < hw; ++i)
      for (Index j = 0; j < hw; ++j)
        if (grads.input(0, c, i, j) != 0.0) {
          lo_x = std::min(lo_x, j), hi_x = std::max(hi_x, j);
          lo_y = std::min(lo_y, i), hi_y = std::max(hi_y, i);
        }
  const Index support_w = hi_x - lo_x + 1, support_h = hi_y - lo_y + 1;
  Outcome o;
  o.pass = analytic == Rational(19) && support_w == 19 && support_h == 19;
  o.detail = fmt("analytic rf %s, gradient support %lldx%lld", analytic.str().c_str(), static_cast<long long>(support_h),
                 static_cast<long long>(support_w));
  return o;
}

// ---------------------------------------------------------------- 5

Outcome gradcheck_suite() {
  std::map<std::string, std::pair<int, double>> per_op;  // instances passed, worst error
  bool all = true;
  std::string failures;
  for (int instance = 0; instance < 5; ++instance) {
    for (const auto& c : testing::gradcheck_cases(instance)) {
      const auto r = gradcheck(c.op, c.inputs, 1e-4);
      auto& [passed, worst] = per_op[r.op];
      worst = std::max(worst, r.max_rel_error);
      if (r.passed) {
        ++passed;
      } else {
        all = false;
        failures += fmt("%s#%d %s; ", r.op.c_str(), instance, r.worst.c_str());
      }
    }
  }
  double worst = 0.0;
  for (const auto& [op, pw] : per_op) {
    all = all && pw.first >= 5;
    worst = std::max(worst, pw.second);
  }
  return {all, fmt("%zu operators x 5 instances, worst rel err %.2e %s", per_op.size(), worst, failures.c_str())};
}

// ---------------------------------------------------------------- 6 and 7

SUNetConfig toy_n8() {
  SUNetConfig c;
  c.name = "toy_n8";
  c.stem_channels = 16;
  c.stem_out = 16;
  c.blocks = {{{1, 8, 16, false}, {1, 8, 24, false}, {1, 8, 32, false}, {1, 8, 40, true}}};
  c.num_classes = 4;
  return c;
}

SegmentationConfig seg_config(int os, bool multigrid, int classes) {
  SegmentationConfig s;
  s.output_stride = os;
  s.multigrid = multigrid;
  s.num_classes = classes;
  return s;
}

template <typename S>
ParamStore<S> randomized(const NetworkGraph& g, std::uint64_t seed) {
  auto p = init_params<S>(g, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> scale(0.5, 1.5), shift(-0.3, 0.3);
  for (auto& [name, st] : p.bn)
    for (Index c = 0; c < st.channels(); ++c) {
      st.gamma[c] = static_cast<S>(scale(rng));
      st.beta[c] = static_cast<S>(shift(rng));
      st.running_mean[c] = static_cast<S>(shift(rng));
      st.running_var[c] = static_cast<S>(scale(rng));
    }
  return p;
}

Outcome atrous_equivalence() {
  const auto g = build_classifier(toy_n8(), 128, 128);
  const auto p = randomized<float>(g, 3);
  Tensor<float> x({1, 3, 129, 129});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);

  const auto os32 = to_segmentation(g, seg_config(32, true, 3));
  const auto os16 = to_segmentation(g, seg_config(16, true, 3));
  const auto os8 = to_segmentation(g, seg_config(8, true, 3));
  const auto os16_strided = to_segmentation(g, seg_config(16, false, 3));
  const auto a = atrous_equivalence_check(os32, os16, p, x);
  const auto b = atrous_equivalence_check(os16, os8, p, x);
  const auto c = atrous_equivalence_check(os32, os16_strided, p, x);
  Outcome o;
  o.pass = a.compared > 0 && b.compared > 0 && a.max_abs_diff < 1e-4 && b.max_abs_diff < 1e-4 && c.max_abs_diff > 1e-2;
  o.detail = fmt("32v16 %.2e (%lld values), 16v8 %.2e (%lld values), strided 32v16 %.2e", a.max_abs_diff,
                 static_cast<long long>(a.compared), b.max_abs_diff, static_cast<long long>(b.compared), c.max_abs_diff);
  return o;
}

Outcome rf_preservation() {
  const auto g = build_classifier(toy_n8(), 128, 128);
  const auto base = receptive_field(g, infer_shapes(g, {1, 3, 128, 128}));
  const int feat = g.find(kFeatureNode);
  Outcome o{true, ""};
  int checked = 0;
  for (int os : {8, 16, 32}) {
    const auto s = to_segmentation(g, seg_config(os, true, 3));
    const auto conv = receptive_field(s, infer_shapes(s, {1, 3, 128, 128}));
    for (int i = 0; i <= feat; ++i) {
      const int j = s.find(g.node(i).name);
      if (j < 0 || !(conv[static_cast<std::size_t>(j)].rf == base[static_cast<std::size_t>(i)].rf)) {
        o.pass = false;
        o.detail += fmt("OS%d %s; ", os, g.node(i).name.c_str());
      }
      ++checked;
    }
  }
  if (o.pass) o.detail = fmt("%d node fields identical at OS 8/16/32", checked);
  return o;
}

// ---------------------------------------------------------------- 8 and 9

Outcome schedule_and_optimizer() {
  LRSchedule s;
  s.kind = ScheduleKind::Cosine;
  s.max_iters = 2000;
  const double lr0 = 0.01;
  const double at0 = lr_at(s, lr0, 0), mid = lr_at(s, lr0, 1000), end = lr_at(s, lr0, 2000);
  const double eps = 4 * std::numeric_limits<double>::epsilon() * lr0;
  bool ok = std::abs(at0 - lr0) <= eps && std::abs(mid - lr0 / 2) <= eps && std::abs(end) <= eps;

  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  OptimizerConfig cfg;
  cfg.momentum = 0.95;
  cfg.weight_decay = 1e-3;
  const double lr = 0.05;
  int exact_steps = 0;
  for (bool nesterov : {true, false}) {
    cfg.nesterov = nesterov;
    double theta = 0.7, v = 0.0, ref_theta = 0.7, ref_v = 0.0;
    for (int step = 0; step < 10; ++step) {
      const double g = n(rng);
      sgd_update(&theta, &g, &v, 1, cfg, lr, cfg.weight_decay);
      const double gt = g + cfg.weight_decay * ref_theta;
      ref_v = cfg.momentum * ref_v + gt;
      ref_theta = nesterov ? ref_theta - lr * (gt + cfg.momentum * ref_v) : ref_theta - lr * ref_v;
      if (theta == ref_theta && v == ref_v) ++exact_steps;
    }
  }
  ok = ok && exact_steps == 20;
  return {ok, fmt("lr(0)=%.17g lr(max/2)=%.17g lr(max)=%.3g; sgd %d/20 steps bit-exact", at0, mid, end, exact_steps)};
}

// Mean IoU recomputed from sets of pixel indices.
double set_oracle_miou(const LabelMap& pred, const LabelMap& truth, int classes) {
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> a, b, inter, uni;
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
      if (truth.data[i] == c) a.insert(i);
      if (pred.data[i] == c) b.insert(i);
    }
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(inter, inter.begin()));
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::inserter(uni, uni.begin()));
    if (uni.empty()) continue;
    sum += static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    ++used;
  }
  return sum / used;
}

Outcome miou_oracle() {
  std::mt19937_64 rng(9);
  auto random_map = [&] {
    LabelMap m(1, 16, 16);
    for (auto& v : m.data) v = static_cast<std::int32_t>(rng() % 2);
    return m;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_map(), t = random_map();
    ConfusionMatrix cm(2);
    accumulate(cm, p, t);
    worst = std::max(worst, std::abs(miou(cm).miou - set_oracle_miou(p, t, 2)));
  }
  const auto t = random_map();
  ConfusionMatrix cm(2);
  accumulate(cm, t, t);
  const double perfect = miou(cm).miou;
  return {worst <= 1e-12 && perfect == 1.0, fmt("max |metric - oracle| %.2e over 20 maps, perfect %.17g", worst, perfect)};
}

// ---------------------------------------------------------------- 10 and 11

struct ToyRun {
  std::vector<LossRecord> losses;
  double single = 0.0;
  double multi = 0.0;
  double train_seconds = 0.0;
  double total_seconds = 0.0;
};

SUNetConfig toy_n16() {
  SUNetConfig c;
  c.name = "toy_n16";
  c.blocks = {{{1, 16, 64, false}, {1, 16, 128, false}, {1, 16, 192, false}, {1, 16, 256, true}}};
  return c;
}

ToyRun toy_segmentation(std::uint64_t seed, const std::filesystem::path& workdir, bool verbose) {
  const auto t0 = Clock::now();
  constexpr int kClasses = 3;
  SyntheticSpec data;
  data.height = data.width = 128;
  data.num_classes = kClasses;
  data.min_shapes = 1;
  data.max_shapes = 3;
  data.min_extent = 32;
  data.max_extent = 80;
  data.seed = seed;
  std::filesystem::remove_all(workdir);
  const auto train_set = generate_synthetic(data, 500, workdir / "train", "train", 0);
  const auto held_out = generate_synthetic(data, 50, workdir / "val", "val", 1000000);
  const auto train_samples = load_samples<float>(train_set);
  const auto val_samples = load_samples<float>(held_out);

  auto classifier = toy_n16();
  classifier.num_classes = kClasses;
  SegmentationConfig sc;
  sc.output_stride = 16;
  sc.num_classes = kClasses;
  const auto g = to_segmentation(build_classifier(classifier, 64, 64), sc);

  TrainConfig tc;
  tc.iterations = 2000;
  tc.schedule.kind = ScheduleKind::Cosine;
  tc.schedule.max_iters = tc.iterations;
  tc.optimizer.lr0 = 0.05;
  tc.optimizer.batch_size = 8;
  tc.augmentation.crop_h = tc.augmentation.crop_w = 64;
  tc.seed = seed;

  ToyRun run;
  const auto t1 = Clock::now();
  auto result = train(g, init_params<float>(g, seed), train_samples, tc, [&](const LossRecord& r) {
    if (verbose && r.iter % 100 == 0)
      std::fprintf(stderr, "  iter %5lld  lr %.5f  loss %.4f  %.0fs\n", static_cast<long long>(r.iter), r.lr, r.loss,
                   seconds_since(t1));
  });
  run.train_seconds = seconds_since(t1);
  run.losses = std::move(result.losses);
  const auto& params = result.checkpoint.params;
  run.single = miou(evaluate_dataset(g, params, val_samples, kClasses, {1.0}, false)).miou;
  run.multi = miou(evaluate_dataset(g, params, val_samples, kClasses, {0.5, 0.75, 1.0, 1.25}, true)).miou;
  run.total_seconds = seconds_since(t0);
  return run;
}

bool same_curve(const std::vector<LossRecord>& a, const std::vector<LossRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].iter != b[i].iter || a[i].lr != b[i].lr || a[i].loss != b[i].loss) return false;
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SUNet acceptance suite"};
  std::vector<int> only;
  std::uint64_t seed = 20240;
  std::string workdir = (std::filesystem::temp_directory_path() / "sunet_acceptance").string();
  bool verbose = false;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--seed", seed, "Master seed for criteria 10 and 11");
  app.add_option("--workdir", workdir, "Scratch directory for synthetic data");
  app.add_flag("-v,--verbose", verbose, "Print training progress");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  int failures = 0;
  auto report = [&](int k, const char* title, const Outcome& o, double secs, double budget) {
    const bool pass = o.pass && (budget <= 0 || secs < budget);
    failures += !pass;
    std::printf("[%s] %2d %s: %s (%.2fs%s)\n", pass ? "PASS" : "FAIL", k, title, o.detail.c_str(), secs,
                budget > 0 ? fmt(", budget %gs", budget).c_str() : "");
    std::fflush(stdout);
  };
  auto run = [&](int k, const char* title, double budget, const std::function<Outcome()>& f) {
    if (!wanted(k)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(k, title, o, seconds_since(t0), budget);
  };

  run(1, "preset parameter counts", 1.0, parameter_counts);
  run(2, "224x224 shape trace", 1.0, shape_trace);
  run(3, "layer counts", 1.0, layer_counts);
  run(4, "field of view 19", 10.0, field_of_view);
  run(5, "gradcheck", 120.0, gradcheck_suite);
  run(6, "a-trous equivalence", 120.0, atrous_equivalence);
  run(7, "rf preservation", 5.0, rf_preservation);
  run(8, "schedule and optimizer", 0.0, schedule_and_optimizer);
  run(9, "mIoU oracle", 0.0, miou_oracle);

  if (wanted(10) || wanted(11)) {
    const std::filesystem::path dir(workdir);
    std::optional<ToyRun> first;
    run(10, "toy segmentation", 1800.0, [&] {
      first = toy_segmentation(seed, dir / "a", verbose);
      const bool ok = first->single >= 0.85 && first->multi >= first->single - 0.02;
      return Outcome{ok, fmt("single-scale mIoU %.4f, multi-scale+flip %.4f, final loss %.4f, train %.0fs",
                             first->single, first->multi, first->losses.back().loss, first->train_seconds)};
    });
    run(11, "determinism", 0.0, [&] {
      if (!first) first = toy_segmentation(seed, dir / "a", verbose);
      const auto second = toy_segmentation(seed, dir / "b", verbose);
      const bool curve = same_curve(first->losses, second.losses);
      const bool metric = first->single == second.single && first->multi == second.multi;
      return Outcome{curve && metric, fmt("%zu losses %s, mIoU %.17g vs %.17g", second.losses.size(),
                                          curve ? "bit-identical" : "differ", first->single, second.single)};
    });
    std::error_code ec;
    std::filesystem::remove_all(dir, ec);
  }

  std::printf("%s: %d failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
