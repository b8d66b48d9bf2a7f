#pragma once
// Define-by-run reverse-mode tape over a fixed set of primitives.
//
// A Tape owns every intermediate value of one forward computation. Each
// primitive computes its value eagerly and, when any input needs a gradient,
// records a closure that pushes the output gradient back to its inputs.
// backward() walks the record in reverse creation order, so the tape is
// always a valid topological order.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "kgadapt/tensor.hpp"

namespace kgadapt {

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  // Used by primitives. The closure is dropped when no input needs a gradient.
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  // nullptr when no gradient reached this node.
  const Matrix* grad(Var v) const;

  // Adds delta into the gradient of v; ignored when v needs no gradient.
  void accumulate(Var v, const Matrix& delta);
  // Direct access for primitives that scatter into a large gradient.
  Matrix* grad_buffer(Var v);

  // Seeds d(out) = 1 for a 1x1 output.
  void backward(Var out);
  void backward(Var out, const Matrix& seed);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Primitive operations. Shapes are checked eagerly and reported as ShapeError.
namespace ad {

// Y = X W^T + b, b a 1 x out row broadcast over rows of X.
Var affine(Tape& t, Var x, Var w, Var b);
Var matmul(Tape& t, Var a, Var b);
// A B^T
Var matmul_nt(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var elu(Tape& t, Var x);
Var gelu(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);

struct BatchStats {
  Matrix mean;      // 1 x D
  Matrix variance;  // 1 x D, biased
};
// Per-feature normalization over all rows of x using the batch's own
// statistics. The statistics are reported through stats when non-null.
Var batch_norm_train(Tape& t, Var x, Var gamma, Var beta, double eps,
                     BatchStats* stats = nullptr);
// Normalization with fixed running statistics.
Var batch_norm_eval(Tape& t, Var x, Var gamma, Var beta, const Matrix& running_mean,
                    const Matrix& running_var, double eps);

// Row g of the result is the mean of rows groups[g] of table; an empty group
// yields a zero row.
Var gather_mean_rows(Tape& t, Var table, const std::vector<std::vector<std::size_t>>& groups);
// x with row r replaced by the single-row v.
Var set_row(Tape& t, Var x, std::size_t r, Var v);
Var select_row(Tape& t, Var x, std::size_t r);
Var slice_cols(Tape& t, Var x, std::size_t first, std::size_t last);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var stack_rows(Tape& t, std::span<const Var> parts);

// Message per edge e: x[src[e]] (elementwise *) x[dst[e]].
Var hadamard_messages(Tape& t, Var x, std::span<const std::size_t> src,
                      std::span<const std::size_t> dst);
// Rows flagged in receiving become the mean of the messages addressed to
// them; every other row passes through unchanged.
Var hierarchical_aggregate(Tape& t, Var x, Var messages, std::span<const std::size_t> dst,
                           const std::vector<bool>& receiving);

struct LossTerms {
  double total = 0.0;
  double cross_entropy = 0.0;
  double sparsity = 0.0;
  double smoothness = 0.0;
};
// Scalar training objective over a B x (n+1) logit matrix:
//   mean cross-entropy
//   + lambda_spa * mean p_A over rows labelled 0
//   + lambda_smt * mean squared difference of p_A between consecutive rows
// where p_A = 1 - softmax(row)[0].
Var anomaly_loss(Tape& t, Var logits, std::span<const int> labels, double lambda_spa,
                 double lambda_smt, LossTerms* terms = nullptr);

}  // namespace ad
}  // namespace kgadapt
