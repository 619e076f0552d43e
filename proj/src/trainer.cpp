#include "conclu/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "conclu/rng.hpp"

namespace conclu::train {

LossMode parse_loss_mode(const std::string& name) {
  if (name == "joint") return LossMode::kJoint;
  if (name == "global_only") return LossMode::kGlobalOnly;
  if (name == "local_only") return LossMode::kLocalOnly;
  throw ConfigError("unknown loss mode '" + name + "' (joint|global_only|local_only)");
}

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::kJoint: return "joint";
    case LossMode::kGlobalOnly: return "global_only";
    case LossMode::kLocalOnly: return "local_only";
  }
  return "joint";
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (lr_decay_every == 0) throw ConfigError("lr_decay_every must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(eta >= 0.0)) throw ConfigError("eta must be non-negative");
  if (!(sinkhorn_epsilon > 0.0)) throw ConfigError("sinkhorn_epsilon must be positive");
  if (sinkhorn_iters == 0) throw ConfigError("sinkhorn_iters must be positive");
  if (num_prototypes == 0) throw ConfigError("num_prototypes must be positive");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  augment.validate();
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.lr_decay_every));
}

CloudError::CloudError(std::size_t cloud, const std::exception& cause)
    : Error("cloud " + std::to_string(cloud) + ": " + cause.what()),
      cloud_(cloud),
      cause_(std::current_exception()) {}

std::vector<ViewPair> make_batch_views(std::span<const geom::PointCloud> batch,
                                       const geom::AugmentConfig& augment, std::uint64_t step_seed) {
  std::vector<ViewPair> views;
  views.reserve(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    auto [a, b] = geom::make_views(batch[k], augment, mix_seed(step_seed, k));
    views.push_back({std::move(a), std::move(b)});
  }
  return views;
}

namespace {

// Class probabilities, prototypes and pseudo-labels of one view.
loss::ViewTerms cluster_view(net::Forward& fwd, const diff::Var& points, const diff::Var& features,
                             const geom::PointCloud& pc, const TrainConfig& cfg,
                             const ot::Matrix* frozen, ot::Matrix& produced) {
  diff::Var probs = loss::class_probabilities(fwd.class_logits(features));
  loss::Prototypes protos = loss::prototypes(points, probs);
  if (frozen) {
    produced = *frozen;
  } else {
    const diff::Tensor& c = protos.centers.value();
    const ot::Matrix centers =
        Eigen::Map<const ot::Matrix>(c.data(), static_cast<Eigen::Index>(c.rows()), 3);
    // The cost is built from plain values: no gradient flows through D.
    const ot::Matrix d = ot::cost_matrix(pc.points, centers);
    produced = ot::pseudo_labels(ot::sinkhorn(d, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters));
  }
  diff::Tensor gamma = diff::Tensor::matrix(
      static_cast<std::size_t>(produced.rows()), static_cast<std::size_t>(produced.cols()),
      std::vector<double>(produced.data(), produced.data() + produced.size()));
  return {std::move(gamma), probs, protos.centers};
}

}  // namespace

StepOutput compute_step(net::ModelState& state, std::span<const ViewPair> views,
                        const TrainConfig& cfg, const FrozenTargets* frozen, bool update_stats) {
  if (views.empty()) throw EmptyInputError("train step needs a nonempty batch");
  const std::size_t batch = views.size();
  const bool local = cfg.loss_mode != LossMode::kGlobalOnly;
  const bool global = cfg.loss_mode != LossMode::kLocalOnly;
  if (local && state.config.num_prototypes != cfg.num_prototypes) {
    throw ConfigError("train config J=" + std::to_string(cfg.num_prototypes) +
                      " does not match network J=" + std::to_string(state.config.num_prototypes));
  }

  diff::Tape tape;
  net::Forward fwd(tape, state, diff::NormMode::kTrain, true, update_stats);

  std::vector<diff::Var> points_a, points_b, feat_a, feat_b;
  for (const ViewPair& v : views) {
    points_a.push_back(fwd.points(v.a));
    points_b.push_back(fwd.points(v.b));
  }
  if (state.config.bn_over_batch) {
    std::vector<diff::Var> all(points_a);
    all.insert(all.end(), points_b.begin(), points_b.end());
    auto feats = fwd.encode_joint(all);
    feat_a.assign(feats.begin(), feats.begin() + static_cast<std::ptrdiff_t>(batch));
    feat_b.assign(feats.begin() + static_cast<std::ptrdiff_t>(batch), feats.end());
  } else {
    for (std::size_t k = 0; k < batch; ++k) {
      try {
        feat_a.push_back(fwd.encode(points_a[k]));
        feat_b.push_back(fwd.encode(points_b[k]));
      } catch (const Error& e) {
        throw CloudError(k, e);
      }
    }
  }

  StepOutput out;
  out.losses.eta = cfg.eta;
  const double inv_b = 1.0 / static_cast<double>(batch);
  std::vector<diff::Var> per_cloud;

  if (local) {
    out.targets.a.resize(batch);
    out.targets.b.resize(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      try {
        auto ta = cluster_view(fwd, points_a[k], feat_a[k], views[k].a, cfg,
                               frozen ? &frozen->a.at(k) : nullptr, out.targets.a[k]);
        auto tb = cluster_view(fwd, points_b[k], feat_b[k], views[k].b, cfg,
                               frozen ? &frozen->b.at(k) : nullptr, out.targets.b[k]);
        loss::LocalTerms lt = loss::local_loss(ta, tb, cfg.eta);
        out.losses.ce_a += inv_b * lt.ce_a.value().item();
        out.losses.ce_b += inv_b * lt.ce_b.value().item();
        out.losses.orth_a += inv_b * lt.orth_a.value().item();
        out.losses.orth_b += inv_b * lt.orth_b.value().item();
        out.losses.local += inv_b * lt.total.value().item();
        per_cloud.push_back(lt.total);
      } catch (const Error& e) {
        throw CloudError(k, e);
      }
    }
  }

  if (global) {
    std::vector<diff::Var> ha, hb;
    for (std::size_t k = 0; k < batch; ++k) {
      ha.push_back(fwd.global_feature(feat_a[k]));
      hb.push_back(fwd.global_feature(feat_b[k]));
    }
    // Both views share one projector batch so batch norm sees 2B rows.
    diff::Var h = diff::concat_rows(diff::stack_rows(ha), diff::stack_rows(hb));
    diff::Var z = fwd.project(h);
    diff::Var q = fwd.predict(z);
    const diff::Tensor& zv = z.value();
    out.targets.z = Eigen::Map<const ot::Matrix>(zv.data(), static_cast<Eigen::Index>(zv.rows()),
                                                  static_cast<Eigen::Index>(zv.cols()));
    const auto [z_rows, z_cols] = std::pair{zv.rows(), zv.cols()};
    diff::Var target = z;
    if (frozen && frozen->z.size() > 0) {
      if (frozen->z.rows() != out.targets.z.rows() || frozen->z.cols() != out.targets.z.cols()) {
        throw DimensionError("frozen stop-gradient targets do not match the batch");
      }
      target = tape.constant(diff::Tensor::matrix(
          z_rows, z_cols, std::vector<double>(frozen->z.data(), frozen->z.data() + frozen->z.size())));
    }
    for (std::size_t k = 0; k < batch; ++k) {
      try {
        diff::Var g = loss::global_loss(diff::row(q, k), diff::row(target, batch + k),
                                        diff::row(q, batch + k), diff::row(target, k));
        out.losses.global += inv_b * g.value().item();
        if (local) {
          per_cloud[k] = loss::total_loss(g, per_cloud[k]);
        } else {
          per_cloud.push_back(g);
        }
      } catch (const Error& e) {
        throw CloudError(k, e);
      }
    }
  }

  diff::Var total = per_cloud.front();
  for (std::size_t k = 1; k < per_cloud.size(); ++k) total = diff::add(total, per_cloud[k]);
  total = diff::scale(total, inv_b);
  out.losses.total = total.value().item();
  if (!std::isfinite(out.losses.total)) throw NumericError("non-finite total loss");

  diff::Gradients grads = tape.backward(total);
  out.grads = net::parameter_gradients(fwd, grads);
  return out;
}

void optimizer_update(net::ModelState& state, std::span<const diff::Tensor> grads,
                      const TrainConfig& cfg, double lr) {
  if (grads.size() != state.params.size()) {
    throw DimensionError("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(state.params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].all_finite()) {
      throw NumericError("non-finite gradient for '" + state.params[i].name + "' at step " +
                         std::to_string(state.step + 1));
    }
  }
  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    net::Parameter& p = state.params[i];
    const diff::Tensor& g = grads[i];
    const double shrink = p.decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
      double& m = p.first_moment[k];
      double& v = p.second_moment[k];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[k];
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[k] * g[k];
      const double step = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
      p.value[k] = p.value[k] * shrink - lr * step;
    }
  }
  state.step = t;
  if (!state.all_finite()) {
    throw NumericError("non-finite parameters after step " + std::to_string(t));
  }
}

loss::LossBreakdown train_step(net::ModelState& state, std::span<const geom::PointCloud> batch,
                               const TrainConfig& cfg, std::uint64_t step_seed, double lr) {
  const auto views = make_batch_views(batch, cfg.augment, step_seed);
  StepOutput out = compute_step(state, views, cfg);
  optimizer_update(state, out.grads, cfg, lr);
  return out.losses;
}

// ---- training loop -----------------------------------------------------------

const char* const kLogHeader = "step,epoch,lr,ce_a,ce_b,orth_a,orth_b,local,global,total";

std::string format_log_row(const LogRow& row) {
  char buf[512];
  const auto& l = row.losses;
  std::snprintf(buf, sizeof buf, "%llu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<unsigned long long>(row.step), row.epoch, row.lr, l.ce_a, l.ce_b,
                l.orth_a, l.orth_b, l.local, l.global, l.total);
  return buf;
}

namespace {

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("checkpoint RNG state is corrupt");
}

// Fisher-Yates with raw engine output, so the permutation does not depend on
// the standard library's distribution implementations.
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

TrainResult train(const std::vector<geom::PointCloud>& dataset, const TrainConfig& cfg,
                  const net::NetworkConfig& net_cfg, const TrainOutputs& outputs,
                  const Checkpoint* resume) {
  cfg.validate();
  if (dataset.empty()) throw EmptyInputError("training dataset is empty");

  TrainResult result;
  std::mt19937_64 rng(cfg.seed);
  std::size_t start_epoch = 0;
  std::uint64_t global_step = 0;
  if (resume) {
    result.state = resume->state;
    start_epoch = resume->epoch;
    global_step = resume->global_step;
    rng_from_string(rng, resume->rng_state);
  } else {
    result.state = net::init_model(net_cfg);
  }

  std::ofstream log;
  if (!outputs.log_csv.empty()) {
    const bool fresh = !std::filesystem::exists(outputs.log_csv) ||
                       std::filesystem::file_size(outputs.log_csv) == 0;
    log.open(outputs.log_csv, std::ios::app);
    if (!log) throw Error("cannot open training log '" + outputs.log_csv.string() + "'");
    if (fresh) log << kLogHeader << '\n';
  }
  if (!outputs.checkpoint_dir.empty()) std::filesystem::create_directories(outputs.checkpoint_dir);

  auto write_checkpoint = [&](std::size_t epochs_done) {
    if (outputs.checkpoint_dir.empty()) return;
    char name[64];
    std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", epochs_done);
    const auto path = outputs.checkpoint_dir / name;
    save_checkpoint({result.state, epochs_done, global_step, rng_to_string(rng)}, path);
    result.checkpoints.push_back(path);
  };

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<geom::PointCloud> batch;
      batch.reserve(end - begin);
      for (std::size_t k = begin; k < end; ++k) batch.push_back(dataset[order[k]]);
      const std::uint64_t step_seed = rng();
      LogRow row{global_step + 1, epoch, lr, {}};
      try {
        row.losses = train_step(result.state, batch, cfg, step_seed, lr);
      } catch (...) {
        if (log) log.flush();
        throw;
      }
      ++global_step;
      if (log) log << format_log_row(row) << '\n';
      result.log.push_back(row);
    }
    if (log) log.flush();
    const std::size_t done = epoch + 1;
    if (done % cfg.checkpoint_every == 0 || done == cfg.epochs) write_checkpoint(done);
  }
  result.epochs_completed = std::max(start_epoch, cfg.epochs);
  return result;
}

}  // namespace conclu::train
