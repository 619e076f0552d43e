#include "conclu/network.hpp"

#include <cmath>
#include <random>

#include "conclu/errors.hpp"

namespace conclu::net {

namespace {

class Builder {
 public:
  Builder(ModelState& state, bool randomize)
      : state_(state), randomize_(randomize), rng_(state.config.seed) {}

  std::vector<Layer> stack(const std::string& prefix, std::size_t in,
                           const std::vector<std::size_t>& widths, bool last_norm,
                           bool last_activation) {
    std::vector<Layer> layers;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const bool last = k + 1 == widths.size();
      const bool norm = !last || last_norm;
      layers.push_back(layer(prefix + "." + std::to_string(k), in, widths[k], norm,
                             last ? last_activation : true));
      in = widths[k];
    }
    return layers;
  }

 private:
  Layer layer(const std::string& name, std::size_t in, std::size_t out, bool norm,
              bool activation) {
    Layer l;
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    l.weight = add_param(name + ".weight", {in, out}, bound, true);
    if (norm) {
      // A bias in front of batch norm is cancelled by the mean subtraction.
      l.bn_scale = add_param(name + ".bn_scale", {out}, -1.0, false);
      l.bn_shift = add_param(name + ".bn_shift", {out}, 0.0, false);
      l.running_mean = add_buffer(name + ".running_mean", out, 0.0);
      l.running_var = add_buffer(name + ".running_var", out, 1.0);
    } else {
      l.bias = add_param(name + ".bias", {out}, bound, true);
    }
    l.activation = activation;
    return l;
  }

  // bound > 0: uniform(-bound, bound); bound < 0: constant 1; bound == 0: zeros.
  std::size_t add_param(std::string name, diff::Shape shape, double bound, bool decay) {
    Tensor value(shape, 0.0);
    if (bound < 0.0) {
      value.fill(1.0);
    } else if (bound > 0.0 && randomize_) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : value.values()) v = dist(rng_);
    }
    state_.params.push_back(
        {std::move(name), std::move(value), Tensor(shape, 0.0), Tensor(shape, 0.0), decay});
    return state_.params.size() - 1;
  }

  std::size_t add_buffer(std::string name, std::size_t size, double fill) {
    state_.buffers.push_back({std::move(name), Tensor(diff::Shape{size}, fill)});
    return state_.buffers.size() - 1;
  }

  ModelState& state_;
  bool randomize_;
  std::mt19937_64 rng_;
};

ModelState build(const NetworkConfig& cfg, bool randomize) {
  cfg.validate();
  ModelState state;
  state.config = cfg;
  Builder b(state, randomize);
  const auto& enc = cfg.encoder_widths;
  state.encoder =
      b.stack("encoder", enc.front(), std::vector<std::size_t>(enc.begin() + 1, enc.end()), true, true);
  state.head = b.stack("head", cfg.feature_dim(), cfg.head_widths, true, false);
  state.projector = b.stack("projector", cfg.feature_dim(),
                            {cfg.proj_hidden, cfg.proj_hidden, cfg.proj_out}, true, false);
  state.predictor = b.stack("predictor", cfg.proj_out, {cfg.pred_hidden, cfg.proj_out}, false, false);
  return state;
}

}  // namespace

void NetworkConfig::validate() const {
  if (encoder_widths.size() < 2 || encoder_widths.front() != 3) {
    throw ConfigError("encoder_widths must start at 3 and have at least one layer");
  }
  if (head_widths.size() != 3) {
    throw ConfigError("the classification head has exactly 3 layers, got " +
                      std::to_string(head_widths.size()) + " widths");
  }
  if (head_widths.back() != num_prototypes) {
    throw ConfigError("last head width " + std::to_string(head_widths.back()) +
                      " must equal num_prototypes " + std::to_string(num_prototypes));
  }
  auto positive = [](std::size_t v) { return v > 0; };
  for (auto w : encoder_widths)
    if (!positive(w)) throw ConfigError("encoder widths must be positive");
  for (auto w : head_widths)
    if (!positive(w)) throw ConfigError("head widths must be positive");
  if (!positive(proj_hidden) || !positive(proj_out) || !positive(pred_hidden)) {
    throw ConfigError("projector/predictor widths must be positive");
  }
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in (0,1)");
  if (!(bn_eps > 0.0)) throw ConfigError("bn_eps must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must lie in [0,1)");
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

bool ModelState::all_finite() const {
  for (const auto& p : params)
    if (!p.value.all_finite()) return false;
  for (const auto& b : buffers)
    if (!b.value.all_finite()) return false;
  return true;
}

ModelState init_model(const NetworkConfig& cfg) { return build(cfg, true); }
ModelState empty_model(const NetworkConfig& cfg) { return build(cfg, false); }

// ---- forward -----------------------------------------------------------------

Forward::Forward(Tape& tape, ModelState& state, NormMode mode, bool track_grad, bool update_stats)
    : tape_(tape), state_(state), mode_(mode), update_stats_(update_stats) {
  params_.reserve(state.params.size());
  for (const auto& p : state.params) params_.push_back(tape.leaf(p.value, track_grad));
}

Var Forward::points(const geom::PointCloud& pc) {
  std::vector<double> v(pc.points.data(), pc.points.data() + pc.points.size());
  return tape_.constant(Tensor::matrix(pc.size(), 3, std::move(v)));
}

Var Forward::run(const std::vector<Layer>& layers, Var x) {
  const auto& cfg = state_.config;
  const diff::BatchNormOptions bn{cfg.bn_eps, cfg.bn_momentum};
  for (const Layer& l : layers) {
    x = diff::matmul(x, params_[l.weight]);
    if (l.bias) x = diff::add_row_vector(x, params_[*l.bias]);
    if (l.bn_scale) {
      Tensor* mean = nullptr;
      Tensor* var = nullptr;
      if (mode_ == NormMode::kEval || update_stats_) {
        mean = &state_.buffers[*l.running_mean].value;
        var = &state_.buffers[*l.running_var].value;
      }
      x = diff::batch_norm(x, params_[*l.bn_scale], params_[*l.bn_shift], mode_, bn, mean, var);
    }
    if (l.activation) x = diff::leaky_relu(x, cfg.leaky_slope);
  }
  return x;
}

Var Forward::encode(const Var& points) {
  if (points.shape().size() != 2 || points.shape()[1] != 3) {
    throw DimensionError("encode expects N×3 points, got " + diff::shape_string(points.shape()));
  }
  return run(state_.encoder, points);
}

std::vector<Var> Forward::encode_joint(std::span<const Var> clouds) {
  if (clouds.empty()) throw EmptyInputError("encode_joint: no clouds");
  Var stacked = clouds.front();
  for (std::size_t k = 1; k < clouds.size(); ++k) stacked = diff::concat_rows(stacked, clouds[k]);
  Var features = encode(stacked);
  std::vector<Var> out;
  std::size_t begin = 0;
  for (const Var& c : clouds) {
    const std::size_t n = c.shape()[0];
    out.push_back(diff::slice_rows(features, begin, begin + n));
    begin += n;
  }
  return out;
}

Var Forward::class_logits(const Var& features) {
  if (features.shape().size() != 2 || features.shape()[1] != state_.config.feature_dim()) {
    throw DimensionError("class_logits expects N×" + std::to_string(state_.config.feature_dim()) +
                         " features, got " + diff::shape_string(features.shape()));
  }
  return run(state_.head, features);
}

Var Forward::project(const Var& h) {
  if (h.shape().size() != 2 || h.shape()[1] != state_.config.feature_dim()) {
    throw DimensionError("project expects B×" + std::to_string(state_.config.feature_dim()) +
                         " global features, got " + diff::shape_string(h.shape()));
  }
  return run(state_.projector, h);
}

Var Forward::predict(const Var& z) {
  if (z.shape().size() != 2 || z.shape()[1] != state_.config.proj_out) {
    throw DimensionError("predict expects B×" + std::to_string(state_.config.proj_out) +
                         " projections, got " + diff::shape_string(z.shape()));
  }
  return run(state_.predictor, z);
}

std::vector<Tensor> parameter_gradients(const Forward& fwd, const diff::Gradients& grads) {
  std::vector<Tensor> out;
  out.reserve(fwd.params().size());
  for (const Var& p : fwd.params()) out.push_back(grads[p]);
  return out;
}

}  // namespace conclu::net
