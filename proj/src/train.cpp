#include "sunet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "sunet/rng.hpp"
#include "sunet/tensor_io.hpp"

namespace sunet {

void OptimizerConfig::validate() const {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(dampening >= 0.0 && dampening <= 1.0)) throw std::invalid_argument("dampening must lie in [0, 1]");
  if (!(lr0 >= 0.0)) throw std::invalid_argument("lr0 must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
}

void LRSchedule::validate() const {
  if (max_iters <= 0) throw std::invalid_argument("max_iters must be positive");
  if (kind == ScheduleKind::Step && (every_epochs <= 0 || iters_per_epoch <= 0 || !(factor > 0.0))) {
    throw std::invalid_argument("step schedule needs positive factor, every_epochs and iters_per_epoch");
  }
}

double lr_at(const LRSchedule& s, double lr0, std::int64_t iter) {
  s.validate();
  if (iter < 0 || iter > s.max_iters) {
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(s.max_iters) + "]");
  }
  if (s.kind == ScheduleKind::Cosine) {
    const double t = static_cast<double>(iter) / static_cast<double>(s.max_iters);
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  const std::int64_t epoch = iter / s.iters_per_epoch;
  return lr0 * std::pow(s.factor, static_cast<double>(epoch / s.every_epochs));
}

template <typename Scalar>
void sgd_update(Scalar* theta, const Scalar* grad, Scalar* velocity, Index n, const OptimizerConfig& cfg, double lr,
                double weight_decay) {
  const double mu = cfg.momentum;
  const double keep = 1.0 - cfg.dampening;
  for (Index i = 0; i < n; ++i) {
    const double g = static_cast<double>(grad[i]) + weight_decay * static_cast<double>(theta[i]);
    const double v = mu * static_cast<double>(velocity[i]) + keep * g;
    velocity[i] = static_cast<Scalar>(v);
    const double step = cfg.nesterov ? g + mu * v : v;
    theta[i] = static_cast<Scalar>(static_cast<double>(theta[i]) - lr * step);
  }
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename Scalar, typename Buffer>
Buffer& velocity_slot(std::map<std::string, Buffer>& m, const std::string& key, const Buffer& like) {
  auto it = m.find(key);
  if (it == m.end()) {
    Buffer z = like;
    if constexpr (std::is_same_v<Buffer, Tensor<Scalar>>) {
      z.vec().setZero();
    } else {
      z.setZero();
    }
    it = m.emplace(key, std::move(z)).first;
  }
  return it->second;
}

}  // namespace

template <typename Scalar>
void sgd_step(ParamStore<Scalar>& params, const Gradients<Scalar>& grads, OptimizerState<Scalar>& state,
              const OptimizerConfig& cfg, double lr) {
  for (const auto& [key, g] : grads.tensors) {
    auto it = params.tensors.find(key);
    if (it == params.tensors.end()) throw std::out_of_range("sgd_step: gradient for unknown parameter " + key);
    Tensor<Scalar>& p = it->second;
    if (g.size() != p.size()) throw ShapeError("sgd_step: gradient shape mismatch for " + key);
    Tensor<Scalar>& v = velocity_slot<Scalar>(state.velocity, key, p);
    const double wd = ends_with(key, "/weight") ? cfg.weight_decay : 0.0;
    sgd_update(p.data(), g.data(), v.data(), p.size(), cfg, lr, wd);
  }
  for (const auto& [node, g] : grads.gamma) {
    auto& st = params.bn.at(node);
    auto& v = velocity_slot<Scalar>(state.velocity_gamma, node, st.gamma);
    sgd_update(st.gamma.data(), g.data(), v.data(), st.gamma.size(), cfg, lr, 0.0);
  }
  for (const auto& [node, g] : grads.beta) {
    auto& st = params.bn.at(node);
    auto& v = velocity_slot<Scalar>(state.velocity_beta, node, st.beta);
    sgd_update(st.beta.data(), g.data(), v.data(), st.beta.size(), cfg, lr, 0.0);
  }
}

// ---- augmentation -------------------------------------------------------------

void AugmentationConfig::validate() const {
  if (!(scale_min > 0.0 && scale_min <= scale_max)) throw std::invalid_argument("scale range must be positive and ordered");
  if (!(rotate_degrees >= 0.0 && rotate_degrees < 180.0)) throw std::invalid_argument("rotation range must lie in [0, 180)");
  if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw std::invalid_argument("hflip probability must lie in [0, 1]");
  if (crop_h < 1 || crop_w < 1) throw std::invalid_argument("crop size must be positive");
}

AugmentationConfig AugmentationConfig::identity(Index h, Index w) {
  AugmentationConfig c;
  c.scale_min = c.scale_max = 1.0;
  c.rotate_degrees = 0.0;
  c.hflip_prob = 0.0;
  c.crop_h = h;
  c.crop_w = w;
  return c;
}

namespace {

LabelMap resize_nearest(const LabelMap& m, Index h, Index w) {
  LabelMap out(m.n, h, w);
  for (Index b = 0; b < m.n; ++b)
    for (Index y = 0; y < h; ++y) {
      const Index sy = std::min<Index>(m.h - 1, static_cast<Index>((y + 0.5) * m.h / h));
      for (Index x = 0; x < w; ++x) {
        const Index sx = std::min<Index>(m.w - 1, static_cast<Index>((x + 0.5) * m.w / w));
        out.at(b, y, x) = m.at(b, sy, sx);
      }
    }
  return out;
}

template <typename Scalar>
std::vector<double> channel_means(const Tensor<Scalar>& t) {
  std::vector<double> m(static_cast<std::size_t>(t.shape().c));
  for (Index c = 0; c < t.shape().c; ++c) {
    m[static_cast<std::size_t>(c)] = static_cast<double>(t.plane(0, c).sum()) / static_cast<double>(t.shape().plane());
  }
  return m;
}

template <typename Scalar>
Sample<Scalar> rotate(const Sample<Scalar>& s, double degrees, std::int32_t ignore) {
  const Shape sh = s.image.shape();
  const auto mean = channel_means(s.image);
  const double a = degrees * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cy = (sh.h - 1) / 2.0, cx = (sh.w - 1) / 2.0;
  Sample<Scalar> out{Tensor<Scalar>(sh), LabelMap(1, sh.h, sh.w, ignore)};
  for (Index y = 0; y < sh.h; ++y) {
    for (Index x = 0; x < sh.w; ++x) {
      // Inverse map of the output pixel into the source frame.
      const double dy = y - cy, dx = x - cx;
      const double sy = cy + ca * dy - sa * dx;
      const double sx = cx + sa * dy + ca * dx;
      const bool inside = sy >= 0.0 && sx >= 0.0 && sy <= sh.h - 1 && sx <= sh.w - 1;
      if (!inside) {
        for (Index c = 0; c < sh.c; ++c) out.image(0, c, y, x) = static_cast<Scalar>(mean[static_cast<std::size_t>(c)]);
        continue;
      }
      const Index y0 = std::min<Index>(static_cast<Index>(sy), sh.h - 1), x0 = std::min<Index>(static_cast<Index>(sx), sh.w - 1);
      const Index y1 = std::min<Index>(y0 + 1, sh.h - 1), x1 = std::min<Index>(x0 + 1, sh.w - 1);
      const double fy = sy - y0, fx = sx - x0;
      for (Index c = 0; c < sh.c; ++c) {
        const double v = (1 - fy) * ((1 - fx) * s.image(0, c, y0, x0) + fx * s.image(0, c, y0, x1)) +
                         fy * ((1 - fx) * s.image(0, c, y1, x0) + fx * s.image(0, c, y1, x1));
        out.image(0, c, y, x) = static_cast<Scalar>(v);
      }
      out.mask.at(0, y, x) = s.mask.at(0, std::lround(sy), std::lround(sx));
    }
  }
  return out;
}

template <typename Scalar>
Sample<Scalar> pad_crop(const Sample<Scalar>& s, Index ch, Index cw, std::int32_t ignore, std::mt19937_64& rng) {
  const Shape sh = s.image.shape();
  const Index ph = std::max(sh.h, ch), pw = std::max(sh.w, cw);
  const Index y0 = std::uniform_int_distribution<Index>(0, ph - ch)(rng);
  const Index x0 = std::uniform_int_distribution<Index>(0, pw - cw)(rng);
  if (sh.h == ch && sh.w == cw) return s;
  const auto mean = channel_means(s.image);
  Sample<Scalar> out{Tensor<Scalar>({1, sh.c, ch, cw}), LabelMap(1, ch, cw, ignore)};
  for (Index y = 0; y < ch; ++y) {
    for (Index x = 0; x < cw; ++x) {
      const Index sy = y + y0, sx = x + x0;
      const bool inside = sy < sh.h && sx < sh.w;
      for (Index c = 0; c < sh.c; ++c) {
        out.image(0, c, y, x) = inside ? s.image(0, c, sy, sx) : static_cast<Scalar>(mean[static_cast<std::size_t>(c)]);
      }
      if (inside) out.mask.at(0, y, x) = s.mask.at(0, sy, sx);
    }
  }
  return out;
}

}  // namespace

template <typename Scalar>
Sample<Scalar> augment(const Sample<Scalar>& s, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const Shape sh = s.image.shape();
  if (sh.n != 1 || sh.h < 1 || sh.w < 1 || sh.c < 1) throw std::invalid_argument("augment: degenerate image " + to_string(sh));
  if (s.mask.n != 1 || s.mask.h != sh.h || s.mask.w != sh.w) {
    throw std::invalid_argument("augment: mask size does not match image " + to_string(sh));
  }
  Sample<Scalar> cur = s;

  const double scale =
      cfg.scale_max > cfg.scale_min ? std::uniform_real_distribution<double>(cfg.scale_min, cfg.scale_max)(rng) : cfg.scale_min;
  if (scale != 1.0) {
    const Index h = std::max<Index>(1, std::lround(sh.h * scale));
    const Index w = std::max<Index>(1, std::lround(sh.w * scale));
    cur.image = bilinear_upsample(cur.image, h, w);
    cur.mask = resize_nearest(cur.mask, h, w);
  }

  const double angle =
      cfg.rotate_degrees > 0.0 ? std::uniform_real_distribution<double>(-cfg.rotate_degrees, cfg.rotate_degrees)(rng) : 0.0;
  if (angle != 0.0) cur = rotate(cur, angle, cfg.ignore_index);

  cur = pad_crop(cur, cfg.crop_h, cfg.crop_w, cfg.ignore_index, rng);

  const bool flip = cfg.hflip_prob > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.hflip_prob;
  if (flip) {
    cur.image = flip_horizontal(cur.image);
    LabelMap m = cur.mask;
    for (Index y = 0; y < m.h; ++y)
      for (Index x = 0; x < m.w; ++x) m.at(0, y, x) = cur.mask.at(0, y, m.w - 1 - x);
    cur.mask = std::move(m);
  }
  return cur;
}

// ---- checkpoints --------------------------------------------------------------

namespace {

template <typename Scalar>
Tensor<Scalar> as_tensor(const VectorX<Scalar>& v) {
  return Tensor<Scalar>(Shape{1, v.size(), 1, 1}, v);
}

}  // namespace

template <typename Scalar>
void write_checkpoint(std::ostream& os, const Checkpoint<Scalar>& c) {
  std::map<std::string, Tensor<Scalar>> entries;
  for (const auto& [k, t] : c.params.tensors) entries.emplace("param/" + k, t);
  for (const auto& [k, s] : c.params.bn) {
    entries.emplace("bn/" + k + "/gamma", as_tensor(s.gamma));
    entries.emplace("bn/" + k + "/beta", as_tensor(s.beta));
    entries.emplace("bn/" + k + "/running_mean", as_tensor(s.running_mean));
    entries.emplace("bn/" + k + "/running_var", as_tensor(s.running_var));
  }
  for (const auto& [k, t] : c.optimizer.velocity) entries.emplace("velocity/" + k, t);
  for (const auto& [k, v] : c.optimizer.velocity_gamma) entries.emplace("velocity_bn/" + k + "/gamma", as_tensor(v));
  for (const auto& [k, v] : c.optimizer.velocity_beta) entries.emplace("velocity_bn/" + k + "/beta", as_tensor(v));

  os.write(kCheckpointMagic, 4);
  le::put_u32(os, kCheckpointVersion);
  le::put_u8(os, static_cast<std::uint8_t>(dtype_of<Scalar>()));
  le::put_u64(os, static_cast<std::uint64_t>(c.iteration));
  le::put_u64(os, c.graph_digest);
  le::put_u64(os, entries.size());
  for (const auto& [name, t] : entries) {
    le::put_string(os, name);
    write_tensor(os, t);
  }
}

template <typename Scalar>
Checkpoint<Scalar> read_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || !std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("checkpoint: bad magic");
  if (le::get_u32(is) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  le::get_u8(is);  // element type of the stored tensors; records carry their own
  Checkpoint<Scalar> c;
  c.iteration = static_cast<std::int64_t>(le::get_u64(is));
  c.graph_digest = le::get_u64(is);
  const std::uint64_t count = le::get_u64(is);
  auto split = [](const std::string& rest) {
    const auto slash = rest.rfind('/');
    if (slash == std::string::npos) throw FormatError("checkpoint: malformed entry name " + rest);
    return std::pair{rest.substr(0, slash), rest.substr(slash + 1)};
  };
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = le::get_string(is);
    Tensor<Scalar> t = read_tensor<Scalar>(is);
    const auto slash = name.find('/');
    const std::string ns = name.substr(0, slash), rest = slash == std::string::npos ? "" : name.substr(slash + 1);
    if (ns == "param") {
      c.params.tensors.emplace(rest, std::move(t));
    } else if (ns == "velocity") {
      c.optimizer.velocity.emplace(rest, std::move(t));
    } else if (ns == "bn") {
      const auto [node, field] = split(rest);
      auto& s = c.params.bn[node];
      if (field == "gamma") s.gamma = t.vec();
      else if (field == "beta") s.beta = t.vec();
      else if (field == "running_mean") s.running_mean = t.vec();
      else if (field == "running_var") s.running_var = t.vec();
      else throw FormatError("checkpoint: unknown batch-norm field " + field);
    } else if (ns == "velocity_bn") {
      const auto [node, field] = split(rest);
      if (field == "gamma") c.optimizer.velocity_gamma[node] = t.vec();
      else if (field == "beta") c.optimizer.velocity_beta[node] = t.vec();
      else throw FormatError("checkpoint: unknown velocity field " + field);
    } else {
      throw FormatError("checkpoint: unknown entry " + name);
    }
  }
  for (const auto& [k, s] : c.params.bn) {
    const Index ch = s.gamma.size();
    if (s.beta.size() != ch || s.running_mean.size() != ch || s.running_var.size() != ch) {
      throw FormatError("checkpoint: incomplete batch-norm state for " + k);
    }
  }
  return c;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_checkpoint(os, c);
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  auto c = read_checkpoint<Scalar>(is);
  if (expected_digest != 0 && c.graph_digest != expected_digest) {
    throw FormatError("checkpoint '" + path.string() + "' was written for a different graph");
  }
  return c;
}

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& rows) {
  os << "iter,lr,loss\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n", static_cast<long long>(r.iter), r.lr, r.loss);
    os << buf;
  }
}

// ---- training loop ------------------------------------------------------------

template <typename Scalar>
TrainResult<Scalar> train(const NetworkGraph& g, const ParamStore<Scalar>& init, const std::vector<Sample<Scalar>>& data,
                          const TrainConfig& cfg, const std::function<void(const LossRecord&)>& on_iteration) {
  cfg.optimizer.validate();
  if (cfg.iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  if (cfg.iterations > 0) {
    cfg.schedule.validate();
    if (cfg.schedule.max_iters < cfg.iterations) throw std::invalid_argument("schedule max_iters is below the iteration count");
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
  }
  if (cfg.augment) cfg.augmentation.validate();

  TrainResult<Scalar> res;
  Checkpoint<Scalar>& ck = res.checkpoint;
  ck.params = init;
  ck.graph_digest = graph_digest(g);

  const Index n = static_cast<Index>(data.size());
  const Index batch = cfg.optimizer.batch_size;
  std::vector<Index> order;
  std::int64_t order_epoch = -1;
  auto pick = [&](std::int64_t slot) {
    const std::int64_t epoch = slot / n;
    if (epoch != order_epoch) {
      order.resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      auto rng = stream({cfg.seed, 0x5eedULL, static_cast<std::uint64_t>(epoch)});
      std::shuffle(order.begin(), order.end(), rng);
      order_epoch = epoch;
    }
    return order[static_cast<std::size_t>(slot % n)];
  };

  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    std::vector<Sample<Scalar>> items;
    items.reserve(static_cast<std::size_t>(batch));
    for (Index j = 0; j < batch; ++j) {
      const Sample<Scalar>& s = data[static_cast<std::size_t>(pick(t * batch + j))];
      const bool image_label = s.mask.h == 1 && s.mask.w == 1;
      if (!cfg.augment) {
        items.push_back(s);
        continue;
      }
      auto rng = stream({cfg.seed, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(j)});
      if (image_label) {
        Sample<Scalar> proxy{s.image, LabelMap(1, s.image.shape().h, s.image.shape().w)};
        Sample<Scalar> a = augment(proxy, cfg.augmentation, rng);
        items.push_back({std::move(a.image), s.mask});
      } else {
        items.push_back(augment(s, cfg.augmentation, rng));
      }
    }

    const Shape is = items.front().image.shape();
    const LabelMap& m0 = items.front().mask;
    Tensor<Scalar> x({batch, is.c, is.h, is.w});
    LabelMap labels(batch, m0.h, m0.w);
    for (Index j = 0; j < batch; ++j) {
      const auto& it = items[static_cast<std::size_t>(j)];
      if (!(it.image.shape() == is) || it.mask.h != m0.h || it.mask.w != m0.w) {
        throw ShapeError("train: samples in a batch differ in size; enable cropping or use equal-sized data");
      }
      x.vec().segment(j * is.c * is.h * is.w, is.c * is.h * is.w) = it.image.vec();
      std::copy(it.mask.data.begin(), it.mask.data.end(), labels.data.begin() + j * m0.h * m0.w);
    }

    auto fwd = forward(g, ck.params, x, cfg.batchnorm_train ? Phase::Train : Phase::Eval);
    const auto ce = softmax_cross_entropy(fwd.output(), labels, cfg.ignore_index);
    if (!std::isfinite(ce.loss)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(t));
    }
    const double lr = lr_at(cfg.schedule, cfg.optimizer.lr0, t);
    const LossRecord rec{t, lr, ce.loss};
    res.losses.push_back(rec);
    if (on_iteration) on_iteration(rec);

    const auto grads = backward(g, ck.params, fwd, g.output, ce.grad);
    sgd_step(ck.params, grads, ck.optimizer, cfg.optimizer, lr);
    ck.iteration = t + 1;

    if (cfg.checkpoint_every > 0 && ck.iteration % cfg.checkpoint_every == 0) {
      save_checkpoint(cfg.checkpoint_dir / ("ckpt_" + std::to_string(ck.iteration) + ".sunc"), ck);
    }
  }
  return res;
}

#define SUNET_INSTANTIATE_TRAIN(S)                                                                                 \
  template void sgd_update(S*, const S*, S*, Index, const OptimizerConfig&, double, double);                       \
  template void sgd_step(ParamStore<S>&, const Gradients<S>&, OptimizerState<S>&, const OptimizerConfig&, double); \
  template Sample<S> augment(const Sample<S>&, const AugmentationConfig&, std::mt19937_64&);                       \
  template void write_checkpoint(std::ostream&, const Checkpoint<S>&);                                             \
  template Checkpoint<S> read_checkpoint<S>(std::istream&);                                                        \
  template void save_checkpoint(const std::filesystem::path&, const Checkpoint<S>&);                               \
  template Checkpoint<S> load_checkpoint<S>(const std::filesystem::path&, std::uint64_t);                          \
  template TrainResult<S> train(const NetworkGraph&, const ParamStore<S>&, const std::vector<Sample<S>>&,          \
                                const TrainConfig&, const std::function<void(const LossRecord&)>&);

SUNET_INSTANTIATE_TRAIN(float)
SUNET_INSTANTIATE_TRAIN(double)

#undef SUNET_INSTANTIATE_TRAIN

}  // namespace sunet
