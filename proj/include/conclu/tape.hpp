#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "conclu/tensor.hpp"

namespace conclu::diff {

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid as long as the
// tape it points into.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients produced by one backward traversal, indexed by tape node.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Tensor> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  // Zero tensor of the node's shape when no gradient reached it.
  Tensor operator[](const Var& v) const;
  bool reached(const Var& v) const { return !grads_[v.id()].empty(); }

 private:
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

// Records primitive applications in creation order, which is a topological
// order. One tape per training step; backward may run once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Gradients backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool backward_done() const noexcept { return backward_done_; }
  bool is_leaf(const Var& v) const { return nodes_[v.id()].inputs.empty(); }
  const std::vector<std::size_t>& inputs_of(const Var& v) const { return nodes_[v.id()].inputs; }

  // Primitive plumbing.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  // Adds into the gradient slot of `id`; no-op when the node needs no grad.
  void accumulate(std::size_t id, const Tensor& g);
  // Mutable slot (allocated on demand) for primitives that scatter.
  Tensor* grad_slot(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var sum(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
// log(max(x, floor)); below the floor the gradient is zero.
Var log_clamped(const Var& a, double floor);

// x[n×d] + b[d] broadcast over rows.
Var add_row_vector(const Var& x, const Var& b);
// y_ij = x_ij / v_i
Var div_rows(const Var& x, const Var& v);
// Column sums of x[n×d] -> [d].
Var column_sums(const Var& x);

Var leaky_relu(const Var& x, double slope = 0.01);
Var row_softmax(const Var& x);
Var max_pool_rows(const Var& x);
Var l2_normalize(const Var& v);
Var l2_normalize_rows(const Var& x);
Var stop_gradient(const Var& x);

// Row i of a matrix as a vector, and the inverse assembly.
Var row(const Var& x, std::size_t i);
Var stack_rows(std::span<const Var> rows);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var concat_rows(const Var& a, const Var& b);

enum class NormMode { kTrain, kEval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.9;
};

// Per-column normalization of x[n×d]. In train mode the batch statistics are
// used and, when running stats are given, folded into them as
// running = momentum * running + (1 - momentum) * batch. In eval mode the
// running stats are required and used as constants.
Var batch_norm(const Var& x, const Var& scale, const Var& shift, NormMode mode,
               const BatchNormOptions& opts, Tensor* running_mean, Tensor* running_var);

}  // namespace conclu::diff
