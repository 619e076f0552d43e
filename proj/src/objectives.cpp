#include "conclu/objectives.hpp"

#include "conclu/errors.hpp"

namespace conclu::loss {

Var class_probabilities(const Var& logits) { return diff::row_softmax(logits); }

Prototypes prototypes(const Var& points, const Var& probs, double mass_floor) {
  if (points.shape().size() != 2 || probs.shape().size() != 2 ||
      points.shape()[0] != probs.shape()[0]) {
    throw DimensionError("prototypes: points " + diff::shape_string(points.shape()) +
                         " and probabilities " + diff::shape_string(probs.shape()) +
                         " disagree");
  }
  Var mass = diff::column_sums(probs);
  const Tensor m = mass.value();  // copy: recording below may move tape storage
  for (std::size_t j = 0; j < m.size(); ++j) {
    if (!(m[j] > mass_floor)) throw DeadPrototypeError(j, m[j]);
  }
  Var weighted = diff::matmul(diff::transpose(probs), points);
  return {diff::div_rows(weighted, mass), m};
}

Var cross_entropy(const Tensor& gamma, const Var& probs, double floor) {
  if (gamma.shape() != probs.shape()) {
    throw DimensionError("cross_entropy: targets " + diff::shape_string(gamma.shape()) +
                         " vs probabilities " + diff::shape_string(probs.shape()));
  }
  Var target = probs.tape().constant(gamma);
  Var log_s = diff::log_clamped(probs, floor);
  const double n = static_cast<double>(probs.shape()[0]);
  return diff::scale(diff::sum(diff::mul(target, log_s)), -1.0 / n);
}

Var orth_reg(const Var& centers) {
  Var unit = diff::l2_normalize_rows(centers);
  Var gram = diff::matmul(unit, diff::transpose(unit));
  const std::size_t j = centers.shape()[0];
  Tensor eye(diff::Shape{j, j}, 0.0);
  for (std::size_t k = 0; k < j; ++k) eye.at(k, k) = 1.0;
  return diff::sum(diff::abs(diff::sub(gram, centers.tape().constant(std::move(eye)))));
}

Var cosine_distance(const Var& q, const Var& z) {
  if (q.shape() != z.shape()) {
    throw DimensionError("cosine_distance: " + diff::shape_string(q.shape()) + " vs " +
                         diff::shape_string(z.shape()));
  }
  return diff::sum(diff::square(diff::sub(diff::l2_normalize(q), diff::l2_normalize(z))));
}

Var global_loss(const Var& qa, const Var& zb, const Var& qb, const Var& za) {
  return diff::add(cosine_distance(qa, diff::stop_gradient(zb)),
                   cosine_distance(qb, diff::stop_gradient(za)));
}

LocalTerms local_loss(const ViewTerms& a, const ViewTerms& b, double eta) {
  if (eta < 0.0) throw ConfigError("eta must be non-negative");
  LocalTerms t;
  t.ce_a = cross_entropy(a.gamma, a.probs);
  t.ce_b = cross_entropy(b.gamma, b.probs);
  t.orth_a = orth_reg(a.centers);
  t.orth_b = orth_reg(b.centers);
  t.total = diff::add(diff::add(t.ce_a, t.ce_b), diff::scale(diff::add(t.orth_a, t.orth_b), eta));
  return t;
}

Var total_loss(const Var& global, const Var& local) { return diff::add(global, local); }

}  // namespace conclu::loss
