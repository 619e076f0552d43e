#pragma once

#include <cstddef>
#include <functional>

#include <Eigen/Core>

#include "conclu/geometry.hpp"

namespace conclu::ot {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// d_ij = |p_i - c_j|^2 for points [N×3] and prototypes [J×3].
Matrix cost_matrix(const geom::Points& points, const Matrix& prototypes);

struct TransportPlan {
  Matrix gamma_joint;  // N×J, row sums ~1/N, column sums 1/J
  double epsilon = 0.0;
  std::size_t iterations = 0;
  bool log_domain = false;
};

enum class KernelDomain { kAuto, kPlain, kLog };

struct SinkhornOptions {
  double epsilon = 1e-3;
  std::size_t iterations = 20;
  // When set, sweeps continue until the worst row-marginal error drops to the
  // tolerance (or max_iterations); `iterations` is then ignored.
  double tolerance = 0.0;
  std::size_t max_iterations = 200000;
  KernelDomain domain = KernelDomain::kAuto;
  // kAuto switches to the log domain once max(D)/epsilon exceeds this.
  double log_domain_threshold = 600.0;
  // Called after each full sweep (row then column rescale) with the current
  // plan; only used by diagnostics.
  std::function<void(std::size_t sweep, const Matrix& plan)> on_sweep;
};

// Entropic OT with uniform marginals. Each sweep rescales rows to 1/N and
// then columns to 1/J, so at exit the column marginals are exact and the row
// marginals carry the residual. The kernel is exp(-D/epsilon).
TransportPlan sinkhorn(const Matrix& cost, double epsilon = 1e-3, std::size_t iterations = 20);
TransportPlan sinkhorn(const Matrix& cost, const SinkhornOptions& options);

// gamma = N * Gamma.
Matrix pseudo_labels(const TransportPlan& plan);

double transport_cost(const Matrix& plan, const Matrix& cost);
// <Gamma, D> + epsilon * sum Gamma (log Gamma - 1), i.e. transport cost minus
// epsilon times the Shannon entropy (up to the constant mass term).
double entropic_objective(const Matrix& plan, const Matrix& cost, double epsilon);

double max_row_deviation(const Matrix& plan);
double max_col_deviation(const Matrix& plan);

struct LpSolution {
  double cost = 0.0;
  Matrix plan;
  std::size_t trees_visited = 0;
};

// Exact minimizer of <Gamma, D> over the transportation polytope with
// marginals (1/N, 1/J), by enumerating every basic feasible solution
// (spanning trees of the bipartite support graph). Only for N <= 6, J <= 4.
LpSolution transport_lp_oracle(const Matrix& cost);

// Number of sinkhorn() calls made by this process.
std::size_t sinkhorn_call_count();

}  // namespace conclu::ot
