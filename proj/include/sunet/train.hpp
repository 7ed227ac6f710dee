#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "sunet/executor.hpp"

namespace sunet {

struct OptimizerConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  bool nesterov = true;
  double dampening = 0.0;
  double weight_decay = 1e-4;
  int batch_size = 8;

  void validate() const;
};

enum class ScheduleKind { Step, Cosine };

struct LRSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  std::int64_t max_iters = 1;
  // Step schedule: lr0 · factor^floor(epoch / every_epochs).
  double factor = 0.1;
  std::int64_t every_epochs = 30;
  std::int64_t iters_per_epoch = 1;

  void validate() const;
};

double lr_at(const LRSchedule& s, double lr0, std::int64_t iter);

/// One SGD update on a flat buffer:
///   g' = g + wd·θ;  v ← μ·v + (1 − dampening)·g';
///   θ ← θ − lr·(g' + μ·v) with Nesterov, θ ← θ − lr·v without.
template <typename Scalar>
void sgd_update(Scalar* theta, const Scalar* grad, Scalar* velocity, Index n, const OptimizerConfig& cfg, double lr,
                double weight_decay);

template <typename Scalar>
struct OptimizerState {
  std::map<std::string, Tensor<Scalar>> velocity;     // keyed like ParamStore::tensors
  std::map<std::string, VectorX<Scalar>> velocity_gamma;
  std::map<std::string, VectorX<Scalar>> velocity_beta;
};

/// Updates every parameter that has a gradient. Weight decay reaches only
/// "<node>/weight" tensors; biases and batch-norm affine terms never decay.
template <typename Scalar>
void sgd_step(ParamStore<Scalar>& params, const Gradients<Scalar>& grads, OptimizerState<Scalar>& state,
              const OptimizerConfig& cfg, double lr);

struct AugmentationConfig {
  double scale_min = 0.5;
  double scale_max = 2.0;
  double rotate_degrees = 10.0;  // uniform in [−r, r]
  double hflip_prob = 0.5;
  Index crop_h = 512;
  Index crop_w = 512;
  std::int32_t ignore_index = kDefaultIgnoreIndex;

  void validate() const;
  /// Scale 1, no rotation, no flip, crop equal to the given size.
  static AugmentationConfig identity(Index h, Index w);
};

/// Image (1, C, H, W) with its (1, H, W) mask.
template <typename Scalar>
struct Sample {
  Tensor<Scalar> image;
  LabelMap mask;
};

/// Random scale (bilinear image, nearest mask), rotation about the centre
/// (image filled with its per-channel mean, mask with the ignore label), crop
/// to crop_h × crop_w after padding the same way, then an optional mirror.
/// Output depends only on the inputs and the state of `rng`.
template <typename Scalar>
Sample<Scalar> augment(const Sample<Scalar>& s, const AugmentationConfig& cfg, std::mt19937_64& rng);

template <typename Scalar>
struct Checkpoint {
  ParamStore<Scalar> params;
  OptimizerState<Scalar> optimizer;
  std::int64_t iteration = 0;
  std::uint64_t graph_digest = 0;
};

/// "SUNC" | u32 version | u8 dtype | u64 iteration | u64 graph digest |
/// u64 entry count | entries of (string name, SUTN tensor record), sorted by name.
inline constexpr char kCheckpointMagic[4] = {'S', 'U', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void write_checkpoint(std::ostream& os, const Checkpoint<Scalar>& c);
template <typename Scalar>
Checkpoint<Scalar> read_checkpoint(std::istream& is);
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& c);
/// Throws FormatError when `expected_digest` is non-zero and differs from the stored one.
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest = 0);

struct LossRecord {
  std::int64_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
};

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& rows);

struct TrainConfig {
  OptimizerConfig optimizer;
  LRSchedule schedule;
  AugmentationConfig augmentation;
  bool augment = true;
  std::int64_t iterations = 0;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir;
  std::uint64_t seed = 0;
  bool batchnorm_train = true;
  std::int32_t ignore_index = kDefaultIgnoreIndex;
};

template <typename Scalar>
struct TrainResult {
  Checkpoint<Scalar> checkpoint;
  std::vector<LossRecord> losses;
};

/// Minibatch SGD on softmax cross-entropy at the graph output. Samples whose
/// mask is 1×1 are image-level labels (classification); otherwise the mask
/// must match the output resolution. Samples are visited in a per-epoch
/// shuffled order; sample j of iteration t is augmented with a stream derived
/// from (seed, t, j). A non-finite loss throws NumericError.
template <typename Scalar>
TrainResult<Scalar> train(const NetworkGraph& g, const ParamStore<Scalar>& init, const std::vector<Sample<Scalar>>& data,
                          const TrainConfig& cfg,
                          const std::function<void(const LossRecord&)>& on_iteration = nullptr);

}  // namespace sunet
