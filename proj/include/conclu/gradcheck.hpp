#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "conclu/tape.hpp"

namespace conclu::diff {

// Builds a scalar loss on `tape` from parameter leaves. Must be a pure
// function of the parameter values.
using TapeFunction = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares the tape gradient of `f` against central differences with step
// `h`. Per component the error is |a - n| / max(|a|, |n|, floor) where floor
// is 1e-3 times the largest numeric gradient magnitude over all components,
// so entries that are negligible next to the dominant ones are measured on
// the gradient's own scale.
GradCheckReport finite_diff_check(const TapeFunction& f, std::vector<Tensor> params,
                                  double h = 1e-5);

// Analytic gradient of `f` at `params`, one tensor per parameter.
std::vector<Tensor> tape_gradient(const TapeFunction& f, std::span<const Tensor> params);

// Value of `f` at `params` on a throwaway tape.
double evaluate(const TapeFunction& f, std::span<const Tensor> params);

}  // namespace conclu::diff
