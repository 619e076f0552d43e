#include "conclu/transport.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "conclu/errors.hpp"

namespace conclu::ot {

namespace {

std::atomic<std::size_t> g_sinkhorn_calls{0};

double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) m = std::max(m, x[k * stride]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += std::exp(x[k * stride] - m);
  return m + std::log(s);
}

void check_plan(const Matrix& plan) {
  if (!plan.allFinite()) throw NumericError("sinkhorn: non-finite transport plan");
}

TransportPlan sinkhorn_plain(const Matrix& cost, const SinkhornOptions& opt) {
  const auto n = cost.rows();
  const auto j = cost.cols();
  const double row_target = 1.0 / static_cast<double>(n);
  const double col_target = 1.0 / static_cast<double>(j);

  // Shifting by the minimum leaves the normalized kernel unchanged and keeps
  // its largest entry at 1.
  Matrix plan = (-(cost.array() - cost.minCoeff()) / opt.epsilon).exp().matrix();
  plan /= plan.sum();

  const bool until_tol = opt.tolerance > 0.0;
  const std::size_t limit = until_tol ? opt.max_iterations : opt.iterations;
  std::size_t sweep = 0;
  while (sweep < limit) {
    Eigen::VectorXd rows = plan.rowwise().sum();
    if (!(rows.minCoeff() > 0.0) || !rows.allFinite()) {
      throw NumericError("sinkhorn: row mass underflowed; use the log-domain kernel");
    }
    plan.array().colwise() *= (row_target / rows.array());
    Eigen::RowVectorXd cols = plan.colwise().sum();
    if (!(cols.minCoeff() > 0.0) || !cols.allFinite()) {
      throw NumericError("sinkhorn: column mass underflowed; use the log-domain kernel");
    }
    plan.array().rowwise() *= (col_target / cols.array());
    ++sweep;
    if (opt.on_sweep) opt.on_sweep(sweep, plan);
    if (until_tol && max_row_deviation(plan) <= opt.tolerance) break;
  }
  check_plan(plan);
  return {std::move(plan), opt.epsilon, sweep, false};
}

TransportPlan sinkhorn_log(const Matrix& cost, const SinkhornOptions& opt) {
  const auto n = static_cast<std::size_t>(cost.rows());
  const auto j = static_cast<std::size_t>(cost.cols());
  const double log_row = -std::log(static_cast<double>(n));
  const double log_col = -std::log(static_cast<double>(j));

  const Matrix log_kernel = -cost / opt.epsilon;
  std::vector<double> a(n, 0.0), b(j, 0.0);
  Matrix work(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j));

  auto assemble = [&]() {
    Matrix plan(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < j; ++c) plan(r, c) = std::exp(log_kernel(r, c) + a[r] + b[c]);
    return plan;
  };

  const bool until_tol = opt.tolerance > 0.0;
  const std::size_t limit = until_tol ? opt.max_iterations : opt.iterations;
  std::size_t sweep = 0;
  const bool need_plan_each_sweep = until_tol || static_cast<bool>(opt.on_sweep);
  while (sweep < limit) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < j; ++c) work(r, c) = log_kernel(r, c) + b[c];
      a[r] = log_row - log_sum_exp(&work(r, 0), j, 1);
    }
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < j; ++c) work(r, c) = log_kernel(r, c) + a[r];
    for (std::size_t c = 0; c < j; ++c) b[c] = log_col - log_sum_exp(&work(0, c), n, j);
    ++sweep;
    if (need_plan_each_sweep) {
      Matrix plan = assemble();
      if (opt.on_sweep) opt.on_sweep(sweep, plan);
      if (until_tol && max_row_deviation(plan) <= opt.tolerance) break;
    }
  }
  for (double v : a)
    if (!std::isfinite(v)) throw NumericError("sinkhorn: non-finite row potential");
  for (double v : b)
    if (!std::isfinite(v)) throw NumericError("sinkhorn: non-finite column potential");
  Matrix plan = assemble();
  // exp() of the potentials carries relative error; rescale so the columns
  // are exact as in the plain kernel.
  const Eigen::RowVectorXd cols = plan.colwise().sum();
  if (!(cols.minCoeff() > 0.0)) throw NumericError("sinkhorn: column mass underflowed");
  plan.array().rowwise() *= (std::exp(log_col) / cols.array());
  check_plan(plan);
  return {std::move(plan), opt.epsilon, sweep, true};
}

}  // namespace

Matrix cost_matrix(const geom::Points& points, const Matrix& prototypes) {
  if (prototypes.cols() != 3) {
    throw DimensionError("cost_matrix: prototypes must be J×3, got " +
                         std::to_string(prototypes.rows()) + "×" +
                         std::to_string(prototypes.cols()));
  }
  Matrix d(points.rows(), prototypes.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index c = 0; c < prototypes.rows(); ++c)
      d(i, c) = (points.row(i) - prototypes.row(c)).squaredNorm();
  return d;
}

TransportPlan sinkhorn(const Matrix& cost, double epsilon, std::size_t iterations) {
  SinkhornOptions opt;
  opt.epsilon = epsilon;
  opt.iterations = iterations;
  return sinkhorn(cost, opt);
}

TransportPlan sinkhorn(const Matrix& cost, const SinkhornOptions& options) {
  g_sinkhorn_calls.fetch_add(1, std::memory_order_relaxed);
  if (!(options.epsilon > 0.0)) {
    throw ConfigError("sinkhorn: epsilon must be positive, got " + std::to_string(options.epsilon));
  }
  if (options.iterations == 0 && options.tolerance <= 0.0) {
    throw ConfigError("sinkhorn: at least one iteration is required");
  }
  if (cost.rows() == 0 || cost.cols() == 0) throw EmptyInputError("sinkhorn: empty cost matrix");
  if (!cost.allFinite()) throw NumericError("sinkhorn: non-finite cost");

  bool use_log = false;
  switch (options.domain) {
    case KernelDomain::kPlain: use_log = false; break;
    case KernelDomain::kLog: use_log = true; break;
    case KernelDomain::kAuto:
      use_log = cost.maxCoeff() / options.epsilon > options.log_domain_threshold;
      break;
  }
  return use_log ? sinkhorn_log(cost, options) : sinkhorn_plain(cost, options);
}

Matrix pseudo_labels(const TransportPlan& plan) {
  return plan.gamma_joint * static_cast<double>(plan.gamma_joint.rows());
}

double transport_cost(const Matrix& plan, const Matrix& cost) {
  return plan.cwiseProduct(cost).sum();
}

double entropic_objective(const Matrix& plan, const Matrix& cost, double epsilon) {
  double neg_entropy = 0.0;
  for (Eigen::Index r = 0; r < plan.rows(); ++r)
    for (Eigen::Index c = 0; c < plan.cols(); ++c) {
      const double g = plan(r, c);
      if (g > 0.0) neg_entropy += g * (std::log(g) - 1.0);
    }
  return transport_cost(plan, cost) + epsilon * neg_entropy;
}

double max_row_deviation(const Matrix& plan) {
  const double target = 1.0 / static_cast<double>(plan.rows());
  return (plan.rowwise().sum().array() - target).abs().maxCoeff();
}

double max_col_deviation(const Matrix& plan) {
  const double target = 1.0 / static_cast<double>(plan.cols());
  return (plan.colwise().sum().array() - target).abs().maxCoeff();
}

std::size_t sinkhorn_call_count() { return g_sinkhorn_calls.load(std::memory_order_relaxed); }

// ---- exact LP by basis enumeration ------------------------------------------

namespace {

struct TreeSearch {
  std::size_t n, j;
  const Matrix& cost;
  std::vector<std::size_t> chosen;
  LpSolution best;
  bool found = false;

  // Union-find over n row nodes followed by j column nodes; copied per level
  // since the graph is tiny.
  static std::size_t find(std::vector<std::size_t>& parent, std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }

  void solve_tree() {
    const double row_supply = 1.0 / static_cast<double>(n);
    const double col_supply = 1.0 / static_cast<double>(j);
    std::vector<double> remaining(n + j);
    for (std::size_t r = 0; r < n; ++r) remaining[r] = row_supply;
    for (std::size_t c = 0; c < j; ++c) remaining[n + c] = col_supply;
    std::vector<int> degree(n + j, 0);
    for (std::size_t cell : chosen) {
      ++degree[cell / j];
      ++degree[n + cell % j];
    }
    std::vector<bool> used(chosen.size(), false);
    Matrix plan = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j));
    for (std::size_t step = 0; step < chosen.size(); ++step) {
      // Find an unused edge with a leaf endpoint.
      bool progressed = false;
      for (std::size_t e = 0; e < chosen.size() && !progressed; ++e) {
        if (used[e]) continue;
        const std::size_t r = chosen[e] / j, c = chosen[e] % j;
        std::size_t leaf, other;
        if (degree[r] == 1) {
          leaf = r;
          other = n + c;
        } else if (degree[n + c] == 1) {
          leaf = n + c;
          other = r;
        } else {
          continue;
        }
        const double v = remaining[leaf];
        plan(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
        remaining[leaf] = 0.0;
        remaining[other] -= v;
        --degree[r];
        --degree[n + c];
        used[e] = true;
        progressed = true;
      }
      if (!progressed) return;
    }
    if (plan.minCoeff() < -1e-12) return;  // infeasible basis
    plan = plan.cwiseMax(0.0);
    ++best.trees_visited;
    const double value = transport_cost(plan, cost);
    if (!found || value < best.cost - 1e-15) {
      best.cost = value;
      best.plan = std::move(plan);
      found = true;
    }
  }

  void recurse(std::size_t cell, const std::vector<std::size_t>& parent) {
    const std::size_t need = n + j - 1;
    if (chosen.size() == need) {
      solve_tree();
      return;
    }
    const std::size_t cells = n * j;
    if (cells - cell < need - chosen.size()) return;
    // Include `cell` when it joins two components.
    {
      std::vector<std::size_t> p = parent;
      const std::size_t ra = find(p, cell / j), rb = find(p, n + cell % j);
      if (ra != rb) {
        p[ra] = rb;
        chosen.push_back(cell);
        recurse(cell + 1, p);
        chosen.pop_back();
      }
    }
    recurse(cell + 1, parent);
  }
};

}  // namespace

LpSolution transport_lp_oracle(const Matrix& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  const auto j = static_cast<std::size_t>(cost.cols());
  if (n == 0 || j == 0) throw EmptyInputError("transport_lp_oracle: empty cost matrix");
  if (n > 6 || j > 4) {
    throw ScaleError("transport_lp_oracle enumerates bases and is limited to 6×4, got " +
                     std::to_string(n) + "×" + std::to_string(j));
  }
  TreeSearch search{n, j, cost, {}, {}, false};
  std::vector<std::size_t> parent(n + j);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  search.recurse(0, parent);
  if (!search.found) throw NumericError("transport_lp_oracle: no feasible basis found");
  return std::move(search.best);
}

}  // namespace conclu::ot
