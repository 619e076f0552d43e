#include "conclu/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "conclu/errors.hpp"

namespace conclu::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

MapConstMat as_matrix(const Tensor& t) {
  return MapConstMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MapMat as_matrix(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

void require_matrix(const Var& a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(a.shape()));
  }
}

void require_vector(const Var& a, const char* op) {
  if (a.shape().size() != 1) {
    throw DimensionError(std::string(op) + ": expected a vector, got " +
                         shape_string(a.shape()));
  }
}

Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands live on different tapes");
  return a.tape();
}

// Applies f elementwise and records g(x, y, upstream) as the local derivative.
template <typename F, typename D>
Var unary_elementwise(const Var& x, F f, D dfdx) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return tape.record(std::move(out), {xi}, [xi, dfdx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    Tensor* slot = t.grad_slot(xi);
    if (!slot) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

// ---- Var / Gradients ---------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Gradients::operator[](const Var& v) const {
  const Tensor& g = grads_.at(v.id());
  if (!g.empty()) return g;
  return Tensor(shapes_.at(v.id()), 0.0);
}

// ---- Tape --------------------------------------------------------------------

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  if (backward_done_) throw TapeError("cannot record on a tape after backward");
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor* Tape::grad_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return &n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Tensor* slot = grad_slot(id);
  if (slot) *slot += g;
}

Gradients Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw TapeError("loss belongs to another tape");
  if (backward_done_) throw TapeError("backward already ran on this tape; build a new one");
  if (loss.value().size() != 1) {
    throw DimensionError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  backward_done_ = true;

  if (nodes_[loss.id()].requires_grad) {
    nodes_[loss.id()].grad = Tensor(loss.shape(), 1.0);
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, k);
    }
  }

  std::vector<Tensor> grads;
  std::vector<Shape> shapes;
  grads.reserve(nodes_.size());
  shapes.reserve(nodes_.size());
  for (Node& n : nodes_) {
    grads.push_back(std::move(n.grad));
    shapes.push_back(n.value.shape());
    n.grad = Tensor();
  }
  return Gradients(std::move(grads), std::move(shapes));
}

// ---- linear algebra ----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions of " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()) + " disagree");
  }
  Tensor out(Shape{av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    auto g = as_matrix(t.grad(self));
    if (Tensor* da = t.grad_slot(ai)) {
      as_matrix(*da).noalias() += g * as_matrix(t.value(bi)).transpose();
    }
    if (Tensor* db = t.grad_slot(bi)) {
      as_matrix(*db).noalias() += as_matrix(t.value(ai)).transpose() * g;
    }
  });
}

Var transpose(const Var& a) {
  require_matrix(a, "transpose");
  const Tensor& av = a.value();
  Tensor out(Shape{av.cols(), av.rows()});
  as_matrix(out) = as_matrix(av).transpose();
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai](Tape& t, std::size_t self) {
    if (Tensor* da = t.grad_slot(ai)) as_matrix(*da) += as_matrix(t.grad(self)).transpose();
  });
}

// ---- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    t.accumulate(ai, t.grad(self));
    t.accumulate(bi, t.grad(self));
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(ai, g);
    if (Tensor* db = t.grad_slot(bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* da = t.grad_slot(ai)) {
      const Tensor& bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
    }
    if (Tensor* db = t.grad_slot(bi)) {
      const Tensor& av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary_elementwise(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var square(const Var& a) {
  return unary_elementwise(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary_elementwise(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var log_clamped(const Var& a, double floor) {
  return unary_elementwise(
      a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary_elementwise(
      x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ai = a.id();
  return a.tape().record(Tensor::scalar(s), {ai}, [ai](Tape& t, std::size_t self) {
    const double g = t.grad(self).item();
    if (Tensor* da = t.grad_slot(ai)) {
      for (double& v : da->values()) v += g;
    }
  });
}

// ---- broadcasting helpers ----------------------------------------------------

Var add_row_vector(const Var& x, const Var& b) {
  Tape& tape = same_tape(x, b);
  require_matrix(x, "add_row_vector");
  require_vector(b, "add_row_vector");
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.cols() != bv.size()) {
    throw DimensionError("add_row_vector: " + shape_string(xv.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.rows(), d = xv.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) += bv[j];
  const std::size_t xi = x.id(), bi = b.id();
  return tape.record(std::move(out), {xi, bi}, [xi, bi, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(xi, g);
    if (Tensor* db = t.grad_slot(bi)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) (*db)[j] += g[i * d + j];
    }
  });
}

Var div_rows(const Var& x, const Var& v) {
  Tape& tape = same_tape(x, v);
  require_matrix(x, "div_rows");
  require_vector(v, "div_rows");
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.rows() != vv.size()) {
    throw DimensionError("div_rows: " + shape_string(xv.shape()) + " and " +
                         shape_string(vv.shape()));
  }
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) / vv[i];
  const std::size_t xi = x.id(), vi = v.id();
  return tape.record(std::move(out), {xi, vi}, [xi, vi, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& vv = t.value(vi);
    if (Tensor* dx = t.grad_slot(xi)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) dx->at(i, j) += g.at(i, j) / vv[i];
    }
    if (Tensor* dv = t.grad_slot(vi)) {
      const Tensor& xv = t.value(xi);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += g.at(i, j) * xv.at(i, j);
        (*dv)[i] -= acc / (vv[i] * vv[i]);
      }
    }
  });
}

Var column_sums(const Var& x) {
  require_matrix(x, "column_sums");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out(Shape{d}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += xv.at(i, j);
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* dx = t.grad_slot(xi)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) dx->at(i, j) += g[j];
    }
  });
}

// ---- network primitives ------------------------------------------------------

Var row_softmax(const Var& x) {
  require_matrix(x, "row_softmax");
  const Tensor& xv = x.value();
  if (!xv.all_finite()) throw NumericError("row_softmax: non-finite input");
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) m = std::max(m, xv.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out.at(i, j) = std::exp(xv.at(i, j) - m);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) /= z;
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, n, d](Tape& t, std::size_t self) {
    Tensor* dx = t.grad_slot(xi);
    if (!dx) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < d; ++j) dx->at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

Var max_pool_rows(const Var& x) {
  require_matrix(x, "max_pool_rows");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (n == 0 || d == 0) throw EmptyInputError("max_pool_rows: empty input");
  Tensor out(Shape{d});
  std::vector<std::size_t> argmax(d, 0);
  for (std::size_t j = 0; j < d; ++j) out[j] = xv.at(0, j);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      // Strict comparison keeps the lowest row index on ties.
      if (xv.at(i, j) > out[j]) {
        out[j] = xv.at(i, j);
        argmax[j] = i;
      }
    }
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi},
                         [xi, d, argmax = std::move(argmax)](Tape& t, std::size_t self) {
                           Tensor* dx = t.grad_slot(xi);
                           if (!dx) return;
                           const Tensor& g = t.grad(self);
                           for (std::size_t j = 0; j < d; ++j) dx->at(argmax[j], j) += g[j];
                         });
}

Var l2_normalize(const Var& v) {
  require_vector(v, "l2_normalize");
  const Tensor& vv = v.value();
  double nrm2 = 0.0;
  for (double e : vv.values()) nrm2 += e * e;
  const double nrm = std::sqrt(nrm2);
  if (!(nrm > 0.0) || !std::isfinite(nrm)) {
    throw DegenerateError("l2_normalize: vector norm is " + std::to_string(nrm));
  }
  Tensor out(vv.shape());
  for (std::size_t i = 0; i < vv.size(); ++i) out[i] = vv[i] / nrm;
  const std::size_t vi = v.id();
  return v.tape().record(std::move(out), {vi}, [vi, nrm](Tape& t, std::size_t self) {
    Tensor* dv = t.grad_slot(vi);
    if (!dv) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    for (std::size_t i = 0; i < g.size(); ++i) (*dv)[i] += (g[i] - y[i] * dot) / nrm;
  });
}

Var l2_normalize_rows(const Var& x) {
  require_matrix(x, "l2_normalize_rows");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  Tensor out(xv.shape());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv.at(i, j) * xv.at(i, j);
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0) || !std::isfinite(norms[i])) {
      throw DegenerateError("l2_normalize_rows: row " + std::to_string(i) + " has norm " +
                            std::to_string(norms[i]));
    }
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) / norms[i];
  }
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi},
                         [xi, n, d, norms = std::move(norms)](Tape& t, std::size_t self) {
                           Tensor* dx = t.grad_slot(xi);
                           if (!dx) return;
                           const Tensor& g = t.grad(self);
                           const Tensor& y = t.value(self);
                           for (std::size_t i = 0; i < n; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += g.at(i, j) * y.at(i, j);
                             for (std::size_t j = 0; j < d; ++j)
                               dx->at(i, j) += (g.at(i, j) - y.at(i, j) * dot) / norms[i];
                           }
                         });
}

Var stop_gradient(const Var& x) {
  // A fresh constant: no inputs, so nothing upstream is reachable from it.
  return x.tape().constant(x.value());
}

// ---- slicing -----------------------------------------------------------------

Var row(const Var& x, std::size_t i) {
  require_matrix(x, "row");
  const Tensor& xv = x.value();
  if (i >= xv.rows()) {
    throw DimensionError("row " + std::to_string(i) + " of " + shape_string(xv.shape()));
  }
  const std::size_t d = xv.cols();
  Tensor out(Shape{d});
  std::copy_n(xv.data() + i * d, d, out.data());
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, i, d](Tape& t, std::size_t self) {
    Tensor* dx = t.grad_slot(xi);
    if (!dx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t j = 0; j < d; ++j) dx->at(i, j) += g[j];
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw EmptyInputError("stack_rows: no rows");
  Tape& tape = rows.front().tape();
  const std::size_t d = rows.front().value().size();
  Tensor out(Shape{rows.size(), d});
  std::vector<std::size_t> ids;
  ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require_vector(rows[i], "stack_rows");
    if (&rows[i].tape() != &tape) throw TapeError("stack_rows: rows on different tapes");
    if (rows[i].value().size() != d) {
      throw DimensionError("stack_rows: row " + std::to_string(i) + " has shape " +
                           shape_string(rows[i].shape()));
    }
    std::copy_n(rows[i].value().data(), d, out.data() + i * d);
    ids.push_back(rows[i].id());
  }
  return tape.record(std::move(out), ids, [ids, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (Tensor* dr = t.grad_slot(ids[i])) {
        for (std::size_t j = 0; j < d; ++j) (*dr)[j] += g[i * d + j];
      }
    }
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  const Tensor& xv = x.value();
  if (begin >= end || end > xv.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") of " + shape_string(xv.shape()));
  }
  const std::size_t d = xv.cols();
  Tensor out(Shape{end - begin, d});
  std::copy(xv.data() + begin * d, xv.data() + end * d, out.data());
  const std::size_t xi = x.id();
  return x.tape().record(std::move(out), {xi}, [xi, begin, d](Tape& t, std::size_t self) {
    Tensor* dx = t.grad_slot(xi);
    if (!dx) return;
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < g.size(); ++k) (*dx)[begin * d + k] += g[k];
  });
}

Var concat_rows(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_matrix(a, "concat_rows");
  require_matrix(b, "concat_rows");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("concat_rows: " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  Tensor out(Shape{av.rows() + bv.rows(), av.cols()});
  std::copy(av.values().begin(), av.values().end(), out.data());
  std::copy(bv.values().begin(), bv.values().end(), out.data() + av.size());
  const std::size_t ai = a.id(), bi = b.id(), split = av.size();
  return tape.record(std::move(out), {ai, bi}, [ai, bi, split](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* da = t.grad_slot(ai)) {
      for (std::size_t k = 0; k < split; ++k) (*da)[k] += g[k];
    }
    if (Tensor* db = t.grad_slot(bi)) {
      for (std::size_t k = 0; k < db->size(); ++k) (*db)[k] += g[split + k];
    }
  });
}

// ---- batch norm --------------------------------------------------------------

Var batch_norm(const Var& x, const Var& scale_v, const Var& shift_v, NormMode mode,
               const BatchNormOptions& opts, Tensor* running_mean, Tensor* running_var) {
  Tape& tape = same_tape(x, scale_v);
  require_matrix(x, "batch_norm");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (scale_v.value().size() != d || shift_v.value().size() != d) {
    throw DimensionError("batch_norm: affine parameters do not match " +
                         shape_string(xv.shape()));
  }
  const Tensor& gamma = scale_v.value();
  const Tensor& beta = shift_v.value();

  std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
  if (mode == NormMode::kTrain) {
    if (n < 2) {
      throw BatchTooSmallError("batch_norm in train mode needs at least 2 rows, got " +
                               std::to_string(n));
    }
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += xv.at(i, j);
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xv.at(i, j) - mean[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(var[j] + opts.eps);
    }
    if (running_mean && running_var) {
      const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
      for (std::size_t j = 0; j < d; ++j) {
        (*running_mean)[j] = opts.momentum * (*running_mean)[j] + (1.0 - opts.momentum) * mean[j];
        (*running_var)[j] =
            opts.momentum * (*running_var)[j] + (1.0 - opts.momentum) * var[j] * unbias;
      }
    }
  } else {
    if (!running_mean || !running_var) {
      throw ConfigError("batch_norm in eval mode needs running statistics");
    }
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] = (*running_mean)[j];
      inv_std[j] = 1.0 / std::sqrt((*running_var)[j] + opts.eps);
    }
  }

  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat.at(i, j) = (xv.at(i, j) - mean[j]) * inv_std[j];
      out.at(i, j) = gamma[j] * xhat.at(i, j) + beta[j];
    }

  const std::size_t xi = x.id(), si = scale_v.id(), bi = shift_v.id();
  const bool train = mode == NormMode::kTrain;
  return tape.record(
      std::move(out), {xi, si, bi},
      [xi, si, bi, n, d, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gamma = t.value(si);
        std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            sum_g[j] += g.at(i, j);
            sum_gx[j] += g.at(i, j) * xhat.at(i, j);
          }
        if (Tensor* ds = t.grad_slot(si)) {
          for (std::size_t j = 0; j < d; ++j) (*ds)[j] += sum_gx[j];
        }
        if (Tensor* db = t.grad_slot(bi)) {
          for (std::size_t j = 0; j < d; ++j) (*db)[j] += sum_g[j];
        }
        Tensor* dx = t.grad_slot(xi);
        if (!dx) return;
        if (!train) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) dx->at(i, j) += g.at(i, j) * gamma[j] * inv_std[j];
          return;
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            dx->at(i, j) += gamma[j] * inv_std[j] *
                            (g.at(i, j) - inv_n * sum_g[j] - xhat.at(i, j) * inv_n * sum_gx[j]);
          }
      });
}

}  // namespace conclu::diff
