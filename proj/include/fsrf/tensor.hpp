#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "fsrf/common.hpp"

namespace fsrf::ad {

// Dense row-major shape; {} is a scalar, {n} a vector, {n,m} a matrix.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};

/// Dense 64-bit tensor with an optional gradient. Copies are shallow: two
/// Tensor handles may share one underlying buffer; ops always allocate fresh
/// outputs, so shared buffers are never overwritten by the graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  /// Trainable leaf: requires_grad set, gradient accumulated by backward().
  static Tensor leaf(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->values.size(); }
  const std::vector<double>& values() const { return impl_->values; }
  /// In-place access for optimizer updates. Never call on a tensor that is
  /// part of a live recorded graph.
  std::vector<double>& values_mut() { return impl_->values; }
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  /// Accumulated gradient; empty vector when no backward pass touched it.
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode tape. Ops executed while a TapeScope is active record a
/// backward closure per node; backward() replays them once in reverse order.
/// A tape is confined to one logical thread and is consumed by backward().
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss)=1 and applies the chain rule in reverse
  /// topological order; every requires_grad leaf accumulates its gradient
  /// into Tensor::grad(). Throws on a non-scalar loss or a consumed tape.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* current();
  void push(std::shared_ptr<TensorImpl> output, std::function<void()> backward_fn);

 private:
  friend class TapeScope;
  struct Node {
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// ---- op set ----------------------------------------------------------
// Shapes are validated; every forward result is checked finite.
// add/sub accept equal shapes, {n,m}+-{m} (per-row) and {n,m}+-{n,1}
// (per-column) broadcasts.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, equal shapes
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
// {n,k}x{k,m}, {k}x{k,m} (row vector) or {n,k}x{k} (column vector).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);    // requires strictly positive input
Tensor sqrt(const Tensor& a);   // requires strictly positive input
Tensor square(const Tensor& a);
// axis 0 on vectors; axis 0 (down columns) or 1 (across rows) on matrices.
Tensor softmax(const Tensor& a, int axis);     // max-subtracted
Tensor logsumexp(const Tensor& a, int axis);   // reduces the given axis
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len);
Tensor reshape(const Tensor& a, Shape shape);
/// Normalizes over the last axis: gain * (x - mu) / sqrt(var + eps) + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
/// 1 - <x,y>/(||x|| ||y||), each norm floored at 1e-12.
Tensor cosine_distance(const Tensor& x, const Tensor& y);
/// C[i][j] = ||X_i - Y_j||^2 for row clouds X {n,d}, Y {m,d}.
Tensor pairwise_sqdist(const Tensor& x, const Tensor& y);
/// Jensen-Shannon divergence of two nonnegative vectors, natural log,
/// 0*log(0/x) := 0. No simplex validation here (see loss::js_divergence).
Tensor js_div(const Tensor& p, const Tensor& q);
/// Stacks equal-length vectors into the rows of a {n,d} matrix.
Tensor stack_rows(const std::vector<Tensor>& rows);
/// concat of scalars into {n} then sum; the usual way to reduce loss terms.
Tensor add_all(const std::vector<Tensor>& terms);

// Generic dispatcher over the contract op set; `axis` applies to
// softmax/concat, layer_norm takes (x, gain, bias).
enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kScalarMul,
  kRelu,
  kExp,
  kLog,
  kSoftmax,
  kSum,
  kMean,
  kSquare,
  kSqrt,
  kConcat,
  kLayerNorm,
  kCosineDistance,
};
struct OpArgs {
  int axis = 0;
  double scalar = 1.0;
};
Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs,
                  const OpArgs& args = {});

}  // namespace fsrf::ad
