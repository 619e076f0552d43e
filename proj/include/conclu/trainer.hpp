#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "conclu/checkpoint.hpp"
#include "conclu/errors.hpp"
#include "conclu/geometry.hpp"
#include "conclu/network.hpp"
#include "conclu/objectives.hpp"
#include "conclu/transport.hpp"

namespace conclu::train {

enum class LossMode { kJoint, kGlobalOnly, kLocalOnly };

LossMode parse_loss_mode(const std::string& name);
std::string to_string(LossMode mode);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double lr_decay = 0.7;
  std::size_t lr_decay_every = 20;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double eta = loss::kDefaultEta;
  double sinkhorn_epsilon = 1e-3;
  std::size_t sinkhorn_iters = 20;
  std::size_t num_prototypes = 64;
  geom::AugmentConfig augment;
  std::uint64_t seed = 0;
  LossMode loss_mode = LossMode::kJoint;
  std::size_t checkpoint_every = 20;

  void validate() const;
};

// lr * decay^floor(epoch / every)
double lr_at(std::size_t epoch, const TrainConfig& cfg);

// The two augmented views of one cloud.
struct ViewPair {
  geom::PointCloud a;
  geom::PointCloud b;
};

std::vector<ViewPair> make_batch_views(std::span<const geom::PointCloud> batch,
                                       const geom::AugmentConfig& augment, std::uint64_t step_seed);

// Everything that enters the loss as a constant: the E-step pseudo-labels
// per cloud and view, and the projector outputs behind the stop-gradient
// (2B rows, view a then view b).
struct FrozenTargets {
  std::vector<ot::Matrix> a;
  std::vector<ot::Matrix> b;
  ot::Matrix z;
};

struct StepOutput {
  loss::LossBreakdown losses;
  std::vector<diff::Tensor> grads;  // one per model parameter
  FrozenTargets targets;
};

// Forward + backward for one batch of view pairs. When `frozen` is given its
// pseudo-labels replace the E-step and, if present, its z rows replace the
// stop-gradient targets, so the loss becomes an ordinary function of the
// parameters. The running
// batch-norm statistics are updated only when `update_stats`.
StepOutput compute_step(net::ModelState& state, std::span<const ViewPair> views,
                        const TrainConfig& cfg, const FrozenTargets* frozen = nullptr,
                        bool update_stats = true);

// Decoupled-weight-decay adaptive-moment update; increments state.step.
void optimizer_update(net::ModelState& state, std::span<const diff::Tensor> grads,
                      const TrainConfig& cfg, double lr);

// Views -> losses -> one optimizer update.
loss::LossBreakdown train_step(net::ModelState& state, std::span<const geom::PointCloud> batch,
                               const TrainConfig& cfg, std::uint64_t step_seed, double lr);

// A failure inside the batch, tagged with the cloud it came from.
class CloudError : public Error {
 public:
  CloudError(std::size_t cloud, const std::exception& cause);
  std::size_t cloud() const noexcept { return cloud_; }
  const std::exception_ptr& cause() const noexcept { return cause_; }

 private:
  std::size_t cloud_;
  std::exception_ptr cause_;
};

struct LogRow {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  loss::LossBreakdown losses;
};

extern const char* const kLogHeader;
std::string format_log_row(const LogRow& row);

struct TrainOutputs {
  std::filesystem::path log_csv;         // empty: no log file
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
};

struct TrainResult {
  net::ModelState state;
  std::vector<LogRow> log;
  std::vector<std::filesystem::path> checkpoints;
  std::size_t epochs_completed = 0;
};

// Runs epochs [start, cfg.epochs) of shuffled mini-batches. `resume`
// continues from a checkpoint's model, counters and RNG state.
TrainResult train(const std::vector<geom::PointCloud>& dataset, const TrainConfig& cfg,
                  const net::NetworkConfig& net_cfg, const TrainOutputs& outputs = {},
                  const Checkpoint* resume = nullptr);

}  // namespace conclu::train
