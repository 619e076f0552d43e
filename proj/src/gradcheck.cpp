#include "conclu/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace conclu::diff {

namespace {

std::vector<Var> bind(Tape& tape, std::span<const Tensor> params, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.leaf(p, requires_grad));
  return vars;
}

}  // namespace

double evaluate(const TapeFunction& f, std::span<const Tensor> params) {
  Tape tape;
  auto vars = bind(tape, params, false);
  return f(tape, vars).value().item();
}

std::vector<Tensor> tape_gradient(const TapeFunction& f, std::span<const Tensor> params) {
  Tape tape;
  auto vars = bind(tape, params, true);
  Var loss = f(tape, vars);
  Gradients grads = tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(grads[v]);
  return out;
}

GradCheckReport finite_diff_check(const TapeFunction& f, std::vector<Tensor> params, double h) {
  const std::vector<Tensor> analytic = tape_gradient(f, params);

  std::vector<Tensor> numeric;
  numeric.reserve(params.size());
  double scale = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor fd(params[p].shape(), 0.0);
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      const double saved = params[p][k];
      params[p][k] = saved + h;
      const double up = evaluate(f, params);
      params[p][k] = saved - h;
      const double down = evaluate(f, params);
      params[p][k] = saved;
      fd[k] = (up - down) / (2.0 * h);
      scale = std::max(scale, std::abs(fd[k]));
    }
    numeric.push_back(std::move(fd));
  }

  const double floor = std::max(1e-3 * scale, 1e-300);
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      const double a = analytic[p][k];
      const double n = numeric[p][k];
      const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      if (err > report.max_rel_error) {
        report = {err, p, k, a, n};
      }
    }
  }
  return report;
}

}  // namespace conclu::diff
