#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "s2rm/errors.hpp"

// Minimal reverse-mode autodiff over dense double tensors.
//
// Design notes:
//  * Values are 64-bit everywhere. Parameters that must survive a 32-bit
//    checkpoint round trip are quantized by the optimizer (see trainer).
//  * Recording is scoped: constructing a Tape makes it current for the
//    calling thread; ops record onto it when any operand is tracked.
//    Distinct threads use distinct tapes, so independent graphs can be
//    evaluated concurrently.
//  * Forward evaluation is bit-deterministic: every reduction runs in
//    row-major order over the output with ascending inner (summed) indices.

namespace s2rm {

using Shape = std::vector<int>;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated only for requires_grad leaves
  bool requires_grad = false;
  const void* tape = nullptr;  // tape that produced this value, if any
};

}  // namespace detail

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor constant(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf with gradient accumulation enabled. Parameters are kept on the
  // 32-bit storage grid (values rounded through float) while all computation
  // stays 64-bit; checkpoints can therefore store them in 32 bits exactly.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  const Shape& shape() const { return impl_->shape; }
  int extent(int axis) const { return impl_->shape[axis]; }
  std::int64_t size() const;

  std::span<const double> data() const { return impl_->data; }
  // In-place access, used by optimizers and test harnesses only; tensors are
  // otherwise immutable after construction.
  std::span<double> mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  std::span<const double> grad() const;
  // Writable view of the gradient buffer, for optimizers (clipping, merging
  // worker contributions).
  std::span<double> mutable_grad();
  void zero_grad();

  double item() const;

  // Stable identity of the underlying buffer; keys gradient sinks.
  const void* id() const { return impl_.get(); }

 private:
  friend class Tape;
  friend struct OpAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Per-buffer gradient accumulators, keyed by Tensor::id().
using GradMap = std::unordered_map<const void*, std::vector<double>>;

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Reverse sweep from a scalar; accumulates into the .grad() buffer of every
  // requires_grad leaf reached. Repeated calls accumulate additively.
  void backward(const Tensor& loss);

  // Same sweep, but leaf gradients are left in `sink` instead of the leaves'
  // own buffers. Lets concurrent workers keep private accumulators that the
  // caller merges in a fixed order.
  void backward(const Tensor& loss, GradMap& sink);

  void record(std::function<void(GradMap&)> node);
  // Registers a requires_grad leaf touched by a recorded op so that backward
  // knows where to flush accumulated gradients.
  void note_leaf(const std::shared_ptr<detail::TensorImpl>& leaf);
  std::size_t node_count() const { return nodes_.size(); }

 private:
  void sweep(const Tensor& loss, GradMap& grads);
  std::vector<std::function<void(GradMap&)>> nodes_;
  std::vector<std::shared_ptr<detail::TensorImpl>> leaves_;
  std::unordered_set<const detail::TensorImpl*> seen_leaves_;
  Tape* previous_ = nullptr;
};

// ---------------------------------------------------------------------------
// Primitive operations (all differentiable unless noted)

// Labelled binary contraction, e.g. contract("mak,akv->mkv", w, v). Indices
// absent from the output are summed. Shared labels must agree in extent.
Tensor contract(const std::string& spec, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// y = scale * x + shift, elementwise with constants.
Tensor scale_shift(const Tensor& x, double scale, double shift);

Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

enum class ElementwiseKind { kExp, kTanh, kSigmoid, kAdd, kMul, kSub, kScale };
// Dispatching wrapper over the functions above; `scale` uses extra as the
// factor and ignores b.
Tensor elementwise(ElementwiseKind kind, const Tensor& a,
                   const Tensor* b = nullptr, double extra = 1.0);

Tensor softmax(const Tensor& x, int axis);
Tensor reduce_sum(const Tensor& x, int axis);
Tensor reduce_sum_all(const Tensor& x);
// Column sums of a rank-2 tensor with addends accumulated in ascending value
// order, making a set sum independent of row presentation order bit-for-bit.
Tensor reduce_sum_rows_ordered(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
// y = x W + b for x of rank 1 (in) or rank 2 (n, in); W is (in, out).
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor l2_normalize(const Tensor& x, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor row(const Tensor& x, int index);
Tensor stack_rows(const std::vector<Tensor>& rows);

// Mean of numerically stabilized binary cross-entropy between logits and
// constant {0,1} targets.
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);

// Elementwise y_i = fwd(x_i) with an explicit derivative dfdx(x_i). Exists
// for ops whose backward is deliberately not the derivative of the forward
// (straight-through estimators).
Tensor unary_custom(const Tensor& x, const std::function<double(double)>& fwd,
                    const std::function<double(double)>& dfdx);

// ---------------------------------------------------------------------------

// Ordered, uniquely named collection of trainable leaves.
class ParamStore {
 public:
  // Returns a handle aliasing the registered tensor (same buffer).
  Tensor add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t count() const { return entries_.size(); }
  std::int64_t total_size() const;
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor& tensor(std::size_t i) { return entries_[i].second; }
  const Tensor& tensor(std::size_t i) const { return entries_[i].second; }

  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Rounds a tensor's values to 32-bit storage precision in place.
void quantize_f32(Tensor& t);

// Max over components of |analytic - central difference| / max(1, |central
// difference|). `f` must map x to a scalar; evaluated in 64-bit throughout.
double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x,
                  double step);

}  // namespace s2rm
