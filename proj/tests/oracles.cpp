#include "oracles.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>

namespace oracle {

std::vector<double> central_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double x0 = x[k];
    x[k] = x0 + h;
    const double up = f(x);
    x[k] = x0 - h;
    const double down = f(x);
    x[k] = x0;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

namespace {

// Dual objective sum a f + sum b g - eps * sum exp((f + g - d)/eps), with the
// plan as a by-product.
double dual_value(const Matrix& d, double eps, const Eigen::VectorXd& f, const Eigen::VectorXd& g,
                  Matrix& plan) {
  const auto n = d.rows(), j = d.cols();
  plan.resize(n, j);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < j; ++c) plan(r, c) = std::exp((f[r] + g[c] - d(r, c)) / eps);
  return f.sum() / static_cast<double>(n) + g.sum() / static_cast<double>(j) - eps * plan.sum();
}

}  // namespace

namespace {

Eigen::VectorXd dual_gradient(const Matrix& plan) {
  const auto n = plan.rows(), j = plan.cols();
  Eigen::VectorXd grad(n + j - 1);
  grad.head(n) = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n)) - plan.rowwise().sum();
  const Eigen::VectorXd colsum = plan.colwise().sum().transpose();
  grad.tail(j - 1) = Eigen::VectorXd::Constant(j - 1, 1.0 / static_cast<double>(j)) - colsum.tail(j - 1);
  return grad;
}

// Damped Newton at a single epsilon from the given potentials.
void newton_stage(const Matrix& cost, double epsilon, double grad_tolerance,
                  std::size_t max_iterations, EntropicSolution& s) {
  const auto n = cost.rows(), j = cost.cols();
  const Eigen::Index m = n + j - 1;
  Matrix plan;
  double value = dual_value(cost, epsilon, s.f, s.g, plan);
  Eigen::VectorXd grad = dual_gradient(plan);
  for (std::size_t it = 0; it < max_iterations; ++it, ++s.iterations) {
    s.grad_norm = grad.norm();
    if (s.grad_norm < grad_tolerance) break;
    // Negative Hessian of the concave dual, scaled by eps, lightly damped.
    const Eigen::VectorXd colsum = plan.colwise().sum().transpose();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index r = 0; r < n; ++r) h(r, r) = plan.row(r).sum();
    for (Eigen::Index c = 1; c < j; ++c) h(n + c - 1, n + c - 1) = colsum[c];
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 1; c < j; ++c) h(r, n + c - 1) = h(n + c - 1, r) = plan(r, c);
    h /= epsilon;
    h.diagonal().array() += 1e-14 * (1.0 + h.diagonal().maxCoeff());
    const Eigen::VectorXd step = h.ldlt().solve(grad);
    bool moved = false;
    double t = 1.0;
    for (int tries = 0; tries < 60 && !moved; ++tries, t *= 0.5) {
      Eigen::VectorXd f = s.f + t * step.head(n);
      Eigen::VectorXd g = s.g;
      g.tail(j - 1) += t * step.tail(j - 1);
      Matrix trial;
      const double v = dual_value(cost, epsilon, f, g, trial);
      if (!std::isfinite(v)) continue;
      const Eigen::VectorXd trial_grad = dual_gradient(trial);
      if (v >= value + 1e-4 * t * grad.dot(step) || trial_grad.norm() < (1.0 - 1e-4 * t) * s.grad_norm) {
        s.f = f;
        s.g = g;
        plan = trial;
        value = v;
        grad = trial_grad;
        moved = true;
      }
    }
    if (!moved) break;  // no progress at working precision
  }
  s.grad_norm = grad.norm();
  s.plan = plan;
}

}  // namespace

EntropicSolution entropic_dual_ascent(const Matrix& cost, double epsilon, double grad_tolerance,
                                      std::size_t max_iterations) {
  const auto n = cost.rows(), j = cost.cols();
  const double ab = 1.0 / static_cast<double>(n * j);
  // Continuation from a large epsilon keeps every stage inside Newton's basin.
  double stage = std::max(epsilon, cost.maxCoeff() - cost.minCoeff());
  EntropicSolution s;
  s.f = Eigen::VectorXd::Zero(n);
  s.g = Eigen::VectorXd::Zero(j);
  for (Eigen::Index r = 0; r < n; ++r) s.f[r] = stage * std::log(ab) + cost.row(r).minCoeff();
  for (;;) {
    const bool last = stage <= epsilon;
    newton_stage(cost, stage, last ? grad_tolerance : 1e-10, max_iterations, s);
    if (last) break;
    stage = std::max(epsilon, stage * 0.5);
  }
  return s;
}

double dual_lower_bound(const Matrix& cost, const Eigen::VectorXd& f) {
  const auto n = cost.rows(), j = cost.cols();
  double value = f.sum() / static_cast<double>(n);
  for (Eigen::Index c = 0; c < j; ++c) {
    double g = INFINITY;
    for (Eigen::Index r = 0; r < n; ++r) g = std::min(g, cost(r, c) - f[r]);
    value += g / static_cast<double>(j);
  }
  return value;
}

}  // namespace oracle
