#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conclu/geometry.hpp"
#include "conclu/tape.hpp"

namespace conclu::net {

using diff::NormMode;
using diff::Tape;
using diff::Tensor;
using diff::Var;

struct NetworkConfig {
  std::vector<std::size_t> encoder_widths{3, 64, 128, 256};
  // Output widths of the three head layers; the last one is J.
  std::vector<std::size_t> head_widths{256, 128, 64};
  std::size_t proj_hidden = 128;
  std::size_t proj_out = 64;
  std::size_t pred_hidden = 32;
  std::size_t num_prototypes = 64;
  std::uint64_t seed = 0;
  // Normalize encoder layers over all points of the batch instead of per cloud.
  bool bn_over_batch = false;
  double leaky_slope = 0.01;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  void validate() const;
  std::size_t feature_dim() const { return encoder_widths.back(); }
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor first_moment;
  Tensor second_moment;
  bool decay = true;  // false for batch-norm scale/shift
};

struct Buffer {
  std::string name;
  Tensor value;
};

struct Layer {
  std::size_t weight = 0;              // parameter index, [in×out]
  std::optional<std::size_t> bias;     // parameter index, [out]
  std::optional<std::size_t> bn_scale;  // parameter indices, [out]
  std::optional<std::size_t> bn_shift;
  std::optional<std::size_t> running_mean;  // buffer indices, [out]
  std::optional<std::size_t> running_var;
  bool activation = true;
};

// All learnable tensors plus batch-norm running statistics and optimizer
// moments. Layers refer to parameters by index so that the flat parameter
// list has one fixed order for optimization and serialization.
struct ModelState {
  NetworkConfig config;
  std::vector<Parameter> params;
  std::vector<Buffer> buffers;
  std::vector<Layer> encoder;
  std::vector<Layer> head;
  std::vector<Layer> projector;
  std::vector<Layer> predictor;
  std::uint64_t step = 0;

  std::size_t parameter_count() const;
  bool all_finite() const;
};

ModelState init_model(const NetworkConfig& cfg);

// Rebuilds the layer tables for `cfg` without touching values; used when
// restoring from a checkpoint.
ModelState empty_model(const NetworkConfig& cfg);

// Binds a model onto one tape for one forward pass. Parameters become leaves
// (requiring gradients when `track_grad`), and train-mode batch norms fold
// their statistics into the model's running buffers when `update_stats`.
class Forward {
 public:
  Forward(Tape& tape, ModelState& state, NormMode mode, bool track_grad = true,
          bool update_stats = true);

  Var points(const geom::PointCloud& pc);
  // N×feature_dim point-wise features.
  Var encode(const Var& points);
  // Encodes several clouds with batch norm over all of their points.
  std::vector<Var> encode_joint(std::span<const Var> clouds);
  Var global_feature(const Var& features) { return diff::max_pool_rows(features); }
  Var class_logits(const Var& features);
  // Rows of h are global features; batch norm runs over those rows.
  Var project(const Var& h);
  Var predict(const Var& z);

  const std::vector<Var>& params() const { return params_; }
  Tape& tape() { return tape_; }

 private:
  Var run(const std::vector<Layer>& layers, Var x);

  Tape& tape_;
  ModelState& state_;
  NormMode mode_;
  bool update_stats_;
  std::vector<Var> params_;
};

// Gradients of every model parameter, in parameter order.
std::vector<Tensor> parameter_gradients(const Forward& fwd, const diff::Gradients& grads);

}  // namespace conclu::net
