#include "conclu/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "conclu/errors.hpp"
#include "conclu/objectives.hpp"

namespace conclu::eval {

FeatureTable extract_features(net::ModelState& state, std::span<const geom::PointCloud> clouds,
                              std::string source) {
  FeatureTable table;
  table.source = std::move(source);
  table.rows.resize(static_cast<Eigen::Index>(clouds.size()),
                    static_cast<Eigen::Index>(state.config.feature_dim()));
  table.labels.reserve(clouds.size());
  for (std::size_t m = 0; m < clouds.size(); ++m) {
    diff::Tape tape;
    net::Forward fwd(tape, state, diff::NormMode::kEval, false, false);
    const diff::Tensor& h = fwd.global_feature(fwd.encode(fwd.points(clouds[m]))).value();
    if (!h.all_finite()) throw NumericError("non-finite feature for cloud " + std::to_string(m));
    for (std::size_t k = 0; k < h.size(); ++k) {
      table.rows(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) = h[k];
    }
    table.labels.push_back(clouds[m].label.value_or(-1));
  }
  return table;
}

// ---- linear probe ------------------------------------------------------------

namespace {

struct Binary {
  Eigen::VectorXd w;
  double b = 0.0;
  std::size_t iterations = 0;
};

double hinge_objective(const RowMatrix& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                       double b, double reg) {
  const Eigen::ArrayXd margin = 1.0 - y.array() * ((x * w).array() + b);
  return 0.5 * reg * w.squaredNorm() + margin.max(0.0).mean();
}

// Subgradient descent; returns the best iterate seen since the method is not
// monotone.
Binary train_binary(const RowMatrix& x, const Eigen::VectorXd& y, const ProbeOptions& opt,
                    double step0) {
  const auto m = static_cast<double>(x.rows());
  Binary cur{Eigen::VectorXd::Zero(x.cols()), 0.0, 0};
  Binary best = cur;
  double best_obj = hinge_objective(x, y, cur.w, cur.b, opt.reg);
  for (std::size_t t = 0; t < opt.max_iterations; ++t) {
    const Eigen::ArrayXd margin = y.array() * ((x * cur.w).array() + cur.b);
    const Eigen::VectorXd active = (margin < 1.0).cast<double>().matrix().cwiseProduct(y);
    Eigen::VectorXd gw = opt.reg * cur.w - x.transpose() * active / m;
    const double gb = -active.sum() / m;
    cur.iterations = t + 1;
    if (std::sqrt(gw.squaredNorm() + gb * gb) < opt.grad_tolerance) break;
    const double eta = step0 / std::sqrt(static_cast<double>(t) + 1.0);
    cur.w -= eta * gw;
    cur.b -= eta * gb;
    const double obj = hinge_objective(x, y, cur.w, cur.b, opt.reg);
    if (obj < best_obj) {
      best_obj = obj;
      best.w = cur.w;
      best.b = cur.b;
    }
  }
  best.iterations = cur.iterations;
  return best;
}

}  // namespace

ProbeResult linear_probe(const FeatureTable& train, const FeatureTable& test,
                         const ProbeOptions& options) {
  if (!(options.reg > 0.0)) throw ConfigError("probe regularization must be positive");
  if (train.rows.rows() == 0) throw EmptyInputError("probe training set is empty");
  if (train.rows.cols() != test.rows.cols()) {
    throw DimensionError("probe train features have " + std::to_string(train.rows.cols()) +
                         " columns, test features " + std::to_string(test.rows.cols()));
  }
  if (static_cast<std::size_t>(train.rows.rows()) != train.labels.size() ||
      static_cast<std::size_t>(test.rows.rows()) != test.labels.size()) {
    throw DimensionError("feature table row count differs from its label count");
  }
  if (!train.rows.allFinite() || !test.rows.allFinite()) {
    throw NumericError("probe features contain non-finite values");
  }
  const std::set<int> class_set(train.labels.begin(), train.labels.end());
  if (class_set.size() < 2) throw ConfigError("linear probe needs at least two training classes");

  const Eigen::RowVectorXd mean = train.rows.colwise().mean();
  Eigen::RowVectorXd scale =
      ((train.rows.rowwise() - mean).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index k = 0; k < scale.size(); ++k) {
    if (scale[k] < 1e-12) scale[k] = 1.0;
  }
  const RowMatrix xtr = ((train.rows.rowwise() - mean).array().rowwise() / scale.array()).matrix();
  const RowMatrix xte = ((test.rows.rowwise() - mean).array().rowwise() / scale.array()).matrix();

  double step0 = options.step;
  if (!(step0 > 0.0)) throw ConfigError("probe step size must be positive");
  step0 /= std::max(1.0, xtr.rowwise().squaredNorm().mean());

  ProbeResult result;
  result.classes.assign(class_set.begin(), class_set.end());
  RowMatrix scores(xte.rows(), static_cast<Eigen::Index>(result.classes.size()));
  for (std::size_t c = 0; c < result.classes.size(); ++c) {
    Eigen::VectorXd y(xtr.rows());
    for (Eigen::Index i = 0; i < xtr.rows(); ++i) {
      y[i] = train.labels[static_cast<std::size_t>(i)] == result.classes[c] ? 1.0 : -1.0;
    }
    const Binary model = train_binary(xtr, y, options, step0);
    result.iterations = std::max(result.iterations, model.iterations);
    scores.col(static_cast<Eigen::Index>(c)) = (xte * model.w).array() + model.b;
  }

  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c) {
      if (scores(i, c) > scores(i, best)) best = c;
    }
    const int pred = result.classes[static_cast<std::size_t>(best)];
    result.predictions.push_back(pred);
    if (pred == test.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  result.accuracy = test.labels.empty()
                        ? 0.0
                        : static_cast<double>(correct) / static_cast<double>(test.labels.size());
  return result;
}

// ---- segmentation --------------------------------------------------------------

std::vector<int> argmax_rows(const ot::Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()), 0);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

Assignment hard_assignments(net::ModelState& state, const geom::PointCloud& pc,
                            const SegmentOptions& options) {
  diff::Tape tape;
  net::Forward fwd(tape, state, diff::NormMode::kEval, false, false);
  const diff::Var points = fwd.points(pc);
  const diff::Var probs = loss::class_probabilities(fwd.class_logits(fwd.encode(points)));
  const diff::Tensor& c = loss::prototypes(points, probs).centers.value();
  const ot::Matrix centers =
      Eigen::Map<const ot::Matrix>(c.data(), static_cast<Eigen::Index>(c.rows()), 3);
  Assignment out;
  out.gamma = ot::pseudo_labels(
      ot::sinkhorn(ot::cost_matrix(pc.points, centers), options.epsilon, options.iterations));
  out.labels = argmax_rows(out.gamma);
  return out;
}

BalanceStats partition_balance(std::span<const int> assignments, std::size_t clusters) {
  if (clusters == 0) throw ConfigError("partition_balance needs at least one cluster");
  BalanceStats s;
  s.counts.assign(clusters, 0);
  for (int a : assignments) {
    if (a < 0 || static_cast<std::size_t>(a) >= clusters) {
      throw DimensionError("cluster label " + std::to_string(a) + " outside [0, " +
                           std::to_string(clusters) + ")");
    }
    ++s.counts[static_cast<std::size_t>(a)];
  }
  const double target = static_cast<double>(assignments.size()) / static_cast<double>(clusters);
  s.min_size = *std::min_element(s.counts.begin(), s.counts.end());
  s.max_size = *std::max_element(s.counts.begin(), s.counts.end());
  s.mean_size = target;
  for (std::size_t n : s.counts) {
    s.max_deviation = std::max(s.max_deviation, std::abs(static_cast<double>(n) - target));
  }
  return s;
}

double soft_balance_deviation(const ot::Matrix& gamma) {
  const double target = static_cast<double>(gamma.rows()) / static_cast<double>(gamma.cols());
  return (gamma.colwise().sum().array() - target).abs().maxCoeff();
}

double adjusted_rand_index(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("ARI inputs have lengths " + std::to_string(pred.size()) + " and " +
                         std::to_string(truth.size()));
  }
  auto pairs = [](double n) { return n * (n - 1.0) / 2.0; };
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    cells[{pred[i], truth[i]}] += 1.0;
    rows[pred[i]] += 1.0;
    cols[truth[i]] += 1.0;
  }
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [_, n] : cells) index += pairs(n);
  for (const auto& [_, n] : rows) sum_a += pairs(n);
  for (const auto& [_, n] : cols) sum_b += pairs(n);
  const double total = pairs(static_cast<double>(pred.size()));
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double max_index = 0.5 * (sum_a + sum_b);
  // Both labelings trivial (all one cluster or all singletons): perfect agreement.
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

// ---- export --------------------------------------------------------------------

void export_features_csv(const FeatureTable& table, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << "label";
  for (Eigen::Index k = 0; k < table.rows.cols(); ++k) os << ",f" << (k + 1);
  os << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < table.rows.rows(); ++i) {
    os << table.labels.at(static_cast<std::size_t>(i));
    for (Eigen::Index k = 0; k < table.rows.cols(); ++k) {
      std::snprintf(buf, sizeof buf, ",%.17g", table.rows(i, k));
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

FeatureTable load_features_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw EmptyInputError("feature CSV '" + path.string() + "' is empty");
  const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  FeatureTable table;
  table.source = path.string();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != cols + 1) throw ParseError("expected " + std::to_string(cols + 1) + " fields", lineno);
    try {
      table.labels.push_back(std::stoi(cells[0]));
      for (std::size_t k = 1; k < cells.size(); ++k) values.push_back(std::stod(cells[k]));
    } catch (const std::logic_error&) {
      throw ParseError("malformed number", lineno);
    }
  }
  table.rows = Eigen::Map<const RowMatrix>(values.data(), static_cast<Eigen::Index>(table.labels.size()),
                                           static_cast<Eigen::Index>(cols));
  return table;
}

RowMatrix pca_2d(const FeatureTable& table) {
  const RowMatrix& x = table.rows;
  if (x.rows() < 2) throw EmptyInputError("PCA needs at least two rows");
  if (x.cols() < 2) throw DimensionError("PCA to 2D needs at least two feature columns");
  const RowMatrix centered = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("PCA eigen decomposition failed");
  const Eigen::Index d = x.cols();
  Eigen::Matrix<double, Eigen::Dynamic, 2> axes(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    axes.col(c) = v;
  }
  return centered * axes;
}

}  // namespace conclu::eval
