#include "conclu/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

#include "conclu/checkpoint.hpp"
#include "conclu/config_io.hpp"
#include "conclu/errors.hpp"
#include "conclu/evaluate.hpp"
#include "conclu/geometry.hpp"
#include "conclu/rng.hpp"
#include "conclu/trainer.hpp"

namespace conclu::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad invocation: missing inputs, clobbered outputs. Maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " '" + path.string() + "' does not exist");
}

// Output directories are append-only: a run never overwrites another run's
// results.
void claim_output(const fs::path& dir, const std::string& marker) {
  if (fs::exists(dir / marker)) {
    throw UsageError("'" + (dir / marker).string() + "' already exists; choose a fresh --out");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory '" + dir.string() + "'");
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << '\n';
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

json read_json(const fs::path& path, const std::string& what) {
  require_file(path, what);
  std::ifstream is(path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + " '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// ---- run configuration ---------------------------------------------------------

struct RunConfig {
  train::TrainConfig train;
  net::NetworkConfig net;
  std::string manifest;
  std::size_t points = 1024;  // samples per mesh when the manifest lists OFF files
  bool head_widths_set = false;
};

template <typename T>
void take(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(dst);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{
      "manifest",       "points",         "epochs",           "batch_size",     "lr",
      "lr_decay",       "lr_decay_every", "weight_decay",     "beta1",          "beta2",
      "adam_eps",       "eta",            "sinkhorn_epsilon", "sinkhorn_iters", "num_prototypes",
      "seed",           "loss_mode",      "checkpoint_every", "keep_fraction",  "out_points",
      "max_angle_deg",  "jitter_sigma",   "jitter_clip",      "encoder_widths", "head_widths",
      "proj_hidden",    "proj_out",       "pred_hidden",      "bn_over_batch",  "leaky_slope",
      "bn_eps",         "bn_momentum"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig rc;
  auto& t = rc.train;
  take(j, "manifest", rc.manifest);
  take(j, "points", rc.points);
  take(j, "epochs", t.epochs);
  take(j, "batch_size", t.batch_size);
  take(j, "lr", t.lr);
  take(j, "lr_decay", t.lr_decay);
  take(j, "lr_decay_every", t.lr_decay_every);
  take(j, "weight_decay", t.weight_decay);
  take(j, "beta1", t.beta1);
  take(j, "beta2", t.beta2);
  take(j, "adam_eps", t.adam_eps);
  take(j, "eta", t.eta);
  take(j, "sinkhorn_epsilon", t.sinkhorn_epsilon);
  take(j, "sinkhorn_iters", t.sinkhorn_iters);
  take(j, "num_prototypes", t.num_prototypes);
  take(j, "seed", t.seed);
  take(j, "checkpoint_every", t.checkpoint_every);
  if (j.contains("loss_mode")) {
    std::string mode;
    take(j, "loss_mode", mode);
    t.loss_mode = train::parse_loss_mode(mode);
  }
  take(j, "keep_fraction", t.augment.keep_fraction);
  take(j, "out_points", t.augment.out_points);
  take(j, "max_angle_deg", t.augment.max_angle_deg);
  take(j, "jitter_sigma", t.augment.jitter_sigma);
  take(j, "jitter_clip", t.augment.jitter_clip);
  take(j, "encoder_widths", rc.net.encoder_widths);
  rc.head_widths_set = j.contains("head_widths");
  take(j, "head_widths", rc.net.head_widths);
  take(j, "proj_hidden", rc.net.proj_hidden);
  take(j, "proj_out", rc.net.proj_out);
  take(j, "pred_hidden", rc.net.pred_hidden);
  take(j, "bn_over_batch", rc.net.bn_over_batch);
  take(j, "leaky_slope", rc.net.leaky_slope);
  take(j, "bn_eps", rc.net.bn_eps);
  take(j, "bn_momentum", rc.net.bn_momentum);
  return rc;
}

// Ties the shared fields together and validates the whole run.
void finalize(RunConfig& rc) {
  rc.net.num_prototypes = rc.train.num_prototypes;
  rc.net.seed = rc.train.seed;
  if (!rc.head_widths_set && !rc.net.head_widths.empty()) {
    rc.net.head_widths.back() = rc.train.num_prototypes;
  }
  rc.train.validate();
  rc.net.validate();
  if (rc.points < 8) throw ConfigError("points must be at least 8");
}

json to_json(const RunConfig& rc) {
  const auto& t = rc.train;
  json j = conclu::to_json(rc.net);
  j.erase("seed");
  j.update({{"manifest", rc.manifest},
            {"points", rc.points},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"lr_decay", t.lr_decay},
            {"lr_decay_every", t.lr_decay_every},
            {"weight_decay", t.weight_decay},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"eta", t.eta},
            {"sinkhorn_epsilon", t.sinkhorn_epsilon},
            {"sinkhorn_iters", t.sinkhorn_iters},
            {"num_prototypes", t.num_prototypes},
            {"seed", t.seed},
            {"loss_mode", train::to_string(t.loss_mode)},
            {"checkpoint_every", t.checkpoint_every},
            {"keep_fraction", t.augment.keep_fraction},
            {"out_points", t.augment.out_points},
            {"max_angle_deg", t.augment.max_angle_deg},
            {"jitter_sigma", t.augment.jitter_sigma},
            {"jitter_clip", t.augment.jitter_clip}});
  return j;
}

// ---- datasets ------------------------------------------------------------------

geom::PointCloud load_cloud(const fs::path& path, std::size_t points, std::uint64_t seed) {
  require_file(path, "cloud");
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  geom::PointCloud pc = ext == ".off" ? geom::load_off(path, points, seed) : geom::load_xyz(path);
  return geom::normalize_cloud(pc);
}

// Manifest paths are relative to the manifest's directory.
std::vector<geom::PointCloud> load_manifest(const fs::path& path, std::size_t points,
                                            std::uint64_t seed) {
  const json j = read_json(path, "manifest");
  if (!j.is_object() || !j.contains("items") || !j.at("items").is_array()) {
    throw ConfigError("manifest '" + path.string() + "' needs an \"items\" array");
  }
  std::vector<geom::PointCloud> clouds;
  std::size_t k = 0;
  for (const auto& item : j.at("items")) {
    if (!item.is_object() || !item.contains("path")) {
      throw ConfigError("manifest item " + std::to_string(k) + " has no \"path\"");
    }
    fs::path p;
    std::optional<int> label;
    try {
      p = item.at("path").get<std::string>();
      if (item.contains("label") && !item.at("label").is_null()) label = item.at("label").get<int>();
    } catch (const json::exception& e) {
      throw ConfigError("manifest item " + std::to_string(k) + ": " + e.what());
    }
    if (p.is_relative()) p = path.parent_path() / p;
    geom::PointCloud pc = load_cloud(p, points, mix_seed(seed, k));
    pc.label = label;
    clouds.push_back(std::move(pc));
    ++k;
  }
  if (clouds.empty()) throw EmptyInputError("manifest '" + path.string() + "' lists no clouds");
  return clouds;
}

Checkpoint load_model(const fs::path& path) {
  require_file(path, "checkpoint");
  return load_checkpoint(path);
}

json balance_json(const eval::BalanceStats& s) {
  return {{"min_size", s.min_size},
          {"max_size", s.max_size},
          {"mean_size", s.mean_size},
          {"max_deviation", s.max_deviation},
          {"counts", s.counts}};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// ---- commands ------------------------------------------------------------------

struct GenDataArgs {
  std::string kinds = "sphere,box,cylinder";
  std::size_t per_class = 10;
  std::size_t points = 512;
  std::string out;
  std::uint64_t seed = 0;
};

void cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  const auto names = split_list(a.kinds);
  if (names.empty()) throw ConfigError("--kinds is empty");
  std::vector<geom::ShapeKind> kinds;
  for (const auto& n : names) kinds.push_back(geom::parse_shape_kind(n));
  if (a.per_class == 0) throw ConfigError("--n-per-class must be positive");
  const fs::path dir(a.out);
  claim_output(dir, "manifest.json");
  json items = json::array();
  std::uint64_t index = 0;
  for (std::size_t c = 0; c < kinds.size(); ++c) {
    for (std::size_t i = 0; i < a.per_class; ++i, ++index) {
      const geom::PointCloud pc = geom::generate_shape(kinds[c], a.points, mix_seed(a.seed, index));
      char name[64];
      std::snprintf(name, sizeof name, "%s_%04zu.xyz", names[c].c_str(), i);
      geom::save_xyz(pc, dir / name);
      items.push_back({{"path", name}, {"label", static_cast<int>(c)}});
    }
  }
  write_json({{"items", items}, {"classes", names}}, dir / "manifest.json");
  out << "wrote " << index << " clouds to " << dir.string() << '\n';
}

struct PretrainArgs {
  std::string config;
  std::string out;
  std::string manifest;
  std::string loss_mode;
  std::string resume;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

void cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  RunConfig rc = a.config.empty() ? RunConfig{} : parse_run_config(read_json(a.config, "config"));
  if (!a.config.empty() && !rc.manifest.empty() && fs::path(rc.manifest).is_relative()) {
    rc.manifest = (fs::path(a.config).parent_path() / rc.manifest).string();
  }
  if (!a.manifest.empty()) rc.manifest = a.manifest;
  if (!a.loss_mode.empty()) rc.train.loss_mode = train::parse_loss_mode(a.loss_mode);
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.seed) rc.train.seed = *a.seed;
  finalize(rc);
  if (rc.manifest.empty()) throw UsageError("no dataset: set \"manifest\" in the config or pass --manifest");

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_model(a.resume);
  const auto dataset = load_manifest(rc.manifest, rc.points, rc.train.seed);

  const fs::path dir(a.out);
  claim_output(dir, "config.json");
  write_json(to_json(rc), dir / "config.json");
  const train::TrainOutputs outputs{dir / "train_log.csv", dir / "checkpoints"};
  const auto result =
      train::train(dataset, rc.train, rc.net, outputs, resume ? &*resume : nullptr);
  if (!result.checkpoints.empty()) {
    fs::copy_file(result.checkpoints.back(), dir / "final.ckpt", fs::copy_options::overwrite_existing);
  }
  const double last = result.log.empty() ? 0.0 : result.log.back().losses.total;
  out << "trained " << result.epochs_completed << " epochs, " << result.log.size()
      << " steps; final loss " << last << '\n';
}

struct ProbeArgs {
  std::string checkpoint;
  std::string train_manifest;
  std::string test_manifest;
  std::string out;
  double reg = 1e-3;
  std::size_t points = 1024;
  std::uint64_t seed = 0;
};

void cmd_probe(const ProbeArgs& a, std::ostream& out) {
  Checkpoint ckpt = load_model(a.checkpoint);
  const auto train_set = load_manifest(a.train_manifest, a.points, a.seed);
  const auto test_set = load_manifest(a.test_manifest, a.points, mix_seed(a.seed, 1));
  const fs::path dir(a.out);
  claim_output(dir, "metrics.json");
  const auto ftr = eval::extract_features(ckpt.state, train_set, a.train_manifest);
  const auto fte = eval::extract_features(ckpt.state, test_set, a.test_manifest);
  eval::ProbeOptions opt;
  opt.reg = a.reg;
  const auto r = eval::linear_probe(ftr, fte, opt);
  write_json({{"probe_accuracy", r.accuracy},
              {"train_size", ftr.rows.rows()},
              {"test_size", fte.rows.rows()},
              {"classes", r.classes},
              {"iterations", r.iterations},
              {"config", {{"checkpoint", a.checkpoint},
                          {"train_manifest", a.train_manifest},
                          {"test_manifest", a.test_manifest},
                          {"reg", a.reg},
                          {"points", a.points},
                          {"seed", a.seed}}}},
             dir / "metrics.json");
  out << "probe accuracy " << r.accuracy << '\n';
}

struct SegmentArgs {
  std::string checkpoint;
  std::string cloud;
  std::string out;
  double epsilon = 1e-3;
  std::size_t iterations = 20;
  std::size_t points = 1024;
  std::uint64_t seed = 0;
};

void cmd_segment(const SegmentArgs& a, std::ostream& out) {
  Checkpoint ckpt = load_model(a.checkpoint);
  geom::PointCloud pc = load_cloud(a.cloud, a.points, a.seed);
  const fs::path dir(a.out);
  claim_output(dir, "metrics.json");
  const auto seg = eval::hard_assignments(ckpt.state, pc, {a.epsilon, a.iterations});
  const std::size_t clusters = ckpt.state.config.num_prototypes;
  json metrics{{"points", pc.size()},
               {"clusters", clusters},
               {"balance", balance_json(eval::partition_balance(seg.labels, clusters))},
               {"soft_balance_deviation", eval::soft_balance_deviation(seg.gamma)},
               {"config", {{"checkpoint", a.checkpoint},
                           {"cloud", a.cloud},
                           {"epsilon", a.epsilon},
                           {"iterations", a.iterations}}}};
  if (pc.part_labels.size() == pc.size()) {
    metrics["ari"] = eval::adjusted_rand_index(seg.labels, pc.part_labels);
  }
  geom::PointCloud labeled = pc;
  labeled.part_labels = seg.labels;
  geom::save_xyz(labeled, dir / "segment.xyz");
  write_json(metrics, dir / "metrics.json");
  out << "segmented " << pc.size() << " points into " << clusters << " clusters";
  if (metrics.contains("ari")) out << ", ARI " << metrics["ari"].get<double>();
  out << '\n';
}

struct ExportArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::size_t points = 1024;
  std::uint64_t seed = 0;
};

void cmd_export(const ExportArgs& a, std::ostream& out) {
  Checkpoint ckpt = load_model(a.checkpoint);
  const auto clouds = load_manifest(a.manifest, a.points, a.seed);
  const fs::path dir(a.out);
  claim_output(dir, "features.csv");
  const auto table = eval::extract_features(ckpt.state, clouds, a.manifest);
  eval::export_features_csv(table, dir / "features.csv");
  const auto proj = eval::pca_2d(table);
  std::ofstream os(dir / "pca.csv");
  if (!os) throw Error("cannot open '" + (dir / "pca.csv").string() + "' for writing");
  os << "label,pc1,pc2\n";
  char buf[96];
  for (Eigen::Index i = 0; i < proj.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", table.labels[static_cast<std::size_t>(i)],
                  proj(i, 0), proj(i, 1));
    os << buf;
  }
  out << "exported " << table.rows.rows() << " feature rows to " << dir.string() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised point cloud clustering and contrastive pretraining", "conclu"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* sub_gen = app.add_subcommand("gen-data", "Generate synthetic shape clouds and a manifest");
  sub_gen->add_option("--kinds", gen.kinds, "Comma-separated shape kinds")->capture_default_str();
  sub_gen->add_option("--n-per-class", gen.per_class, "Clouds per kind")->capture_default_str();
  sub_gen->add_option("--points", gen.points, "Points per cloud")->capture_default_str();
  sub_gen->add_option("--out", gen.out, "Output directory")->required();
  sub_gen->add_option("--seed", gen.seed, "Random seed")->capture_default_str();

  PretrainArgs pre;
  auto* sub_pre = app.add_subcommand("pretrain", "Self-supervised pretraining");
  sub_pre->add_option("--config", pre.config, "JSON run configuration");
  sub_pre->add_option("--out", pre.out, "Output directory")->required();
  sub_pre->add_option("--manifest", pre.manifest, "Dataset manifest (overrides config)");
  sub_pre->add_option("--loss-mode", pre.loss_mode, "joint | global_only | local_only");
  sub_pre->add_option("--epochs", pre.epochs, "Total epochs (overrides config)");
  sub_pre->add_option("--seed", pre.seed, "Seed (overrides config)");
  sub_pre->add_option("--resume", pre.resume, "Checkpoint to continue from");

  ProbeArgs probe;
  auto* sub_probe = app.add_subcommand("probe", "Linear probe on frozen global features");
  sub_probe->add_option("--checkpoint", probe.checkpoint, "Model checkpoint")->required();
  sub_probe->add_option("--train-manifest", probe.train_manifest, "Training manifest")->required();
  sub_probe->add_option("--test-manifest", probe.test_manifest, "Test manifest")->required();
  sub_probe->add_option("--out", probe.out, "Output directory")->required();
  sub_probe->add_option("--reg", probe.reg, "L2 regularization")->capture_default_str();
  sub_probe->add_option("--points", probe.points, "Samples per mesh for OFF inputs")->capture_default_str();
  sub_probe->add_option("--seed", probe.seed, "Mesh sampling seed")->capture_default_str();

  SegmentArgs seg;
  auto* sub_seg = app.add_subcommand("segment", "Per-point cluster labels for one cloud");
  sub_seg->add_option("--checkpoint", seg.checkpoint, "Model checkpoint")->required();
  sub_seg->add_option("--cloud", seg.cloud, "XYZ or OFF input")->required();
  sub_seg->add_option("--out", seg.out, "Output directory")->required();
  sub_seg->add_option("--epsilon", seg.epsilon, "Entropic regularization")->capture_default_str();
  sub_seg->add_option("--iterations", seg.iterations, "Sinkhorn sweeps")->capture_default_str();
  sub_seg->add_option("--points", seg.points, "Samples for OFF inputs")->capture_default_str();
  sub_seg->add_option("--seed", seg.seed, "Mesh sampling seed")->capture_default_str();

  ExportArgs exp;
  auto* sub_exp = app.add_subcommand("export", "Feature CSV and 2D PCA projection");
  sub_exp->add_option("--checkpoint", exp.checkpoint, "Model checkpoint")->required();
  sub_exp->add_option("--manifest", exp.manifest, "Dataset manifest")->required();
  sub_exp->add_option("--out", exp.out, "Output directory")->required();
  sub_exp->add_option("--points", exp.points, "Samples per mesh for OFF inputs")->capture_default_str();
  sub_exp->add_option("--seed", exp.seed, "Mesh sampling seed")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*sub_gen) cmd_gen_data(gen, out);
    else if (*sub_pre) cmd_pretrain(pre, out);
    else if (*sub_probe) cmd_probe(probe, out);
    else if (*sub_seg) cmd_segment(seg, out);
    else if (*sub_exp) cmd_export(exp, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace conclu::cli
