#pragma once

#include "conclu/tape.hpp"

namespace conclu::loss {

using diff::Tensor;
using diff::Var;

inline constexpr double kMassFloor = 1e-8;
inline constexpr double kLogFloor = 1e-12;
inline constexpr double kDefaultEta = 2e-3;

// Row-wise softmax of the logits G.
Var class_probabilities(const Var& logits);

struct Prototypes {
  Var centers;         // J×3 softly weighted means
  Tensor column_mass;  // [J], sum_i s_ij
};

// c_j = sum_i s_ij p_i / sum_i s_ij. Throws DeadPrototypeError when a column
// mass is at or below `mass_floor`.
Prototypes prototypes(const Var& points, const Var& probs, double mass_floor = kMassFloor);

// -(1/N) <gamma, log S>, with S floored at `floor` inside the log. gamma is a
// constant target and never receives gradient.
Var cross_entropy(const Tensor& gamma, const Var& probs, double floor = kLogFloor);

// Sum of |entries| of C*^T C* - I where C* holds the unit-normalized
// prototypes.
Var orth_reg(const Var& centers);

// |q/|q| - z/|z||^2 = 2 - 2 cos(q, z).
Var cosine_distance(const Var& q, const Var& z);

// D(qa, stopgrad(zb)) + D(qb, stopgrad(za)).
Var global_loss(const Var& qa, const Var& zb, const Var& qb, const Var& za);

struct ViewTerms {
  Tensor gamma;  // N×J pseudo-labels
  Var probs;     // N×J class probabilities
  Var centers;   // J×3 prototypes
};

struct LocalTerms {
  Var ce_a, ce_b, orth_a, orth_b;
  Var total;
};

// E(gamma_a, S_a) + E(gamma_b, S_b) + eta (orth(C_a) + orth(C_b)).
LocalTerms local_loss(const ViewTerms& a, const ViewTerms& b, double eta = kDefaultEta);

Var total_loss(const Var& global, const Var& local);

struct LossBreakdown {
  double ce_a = 0.0;
  double ce_b = 0.0;
  double orth_a = 0.0;
  double orth_b = 0.0;
  double local = 0.0;
  double global = 0.0;
  double total = 0.0;
  double eta = kDefaultEta;
};

}  // namespace conclu::loss
