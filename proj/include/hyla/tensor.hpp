#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hyla/rng.hpp"

namespace hyla {

using Shape = std::vector<int>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Matrix products inside contract() run in 64-bit by default; 32-bit compute
// (64-bit storage, float GEMM) can be enabled for training runs.
enum class MatmulPrecision { f64, f32 };
void set_matmul_precision(MatmulPrecision p);
MatmulPrecision matmul_precision();

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated by Tape::backward
  bool requires_grad = false;
};
}  // namespace detail

// Dense N-d array of doubles with value semantics on the handle and shared
// storage underneath, so backward closures can reference operands cheaply.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor uniform(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0,
                        bool requires_grad = false);
  static Tensor normal(const Shape& shape, Rng& rng, double std = 1.0,
                       bool requires_grad = false);
  // one-hot row vector of length depth
  static Tensor one_hot(int index, int depth);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  size_t size() const { return impl_->value.size(); }

  double* data() { return impl_->value.data(); }
  const double* data() const { return impl_->value.data(); }
  std::vector<double>& values() { return impl_->value; }
  const std::vector<double>& values() const { return impl_->value; }
  double& operator[](size_t i) { return impl_->value[i]; }
  double operator[](size_t i) const { return impl_->value[i]; }
  double item() const;  // scalar value; throws unless numel == 1

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
  }

  // Gradient of the last backward pass, as a tensor of the same shape
  // (zeros if this tensor was not touched).
  Tensor grad() const;
  void zero_grad() { impl_->grad.assign(impl_->value.size(), 0.0); }
  const std::vector<double>& grad_values() const { return impl_->grad; }

  bool all_finite() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

// Reverse-mode tape: an ordered list of recorded operations, appended in
// execution order (so producers always precede consumers). backward() seeds
// d(loss)=1 and sweeps the list once in reverse.
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  void record(std::function<void()> backward_fn, std::vector<Tensor> touched);

  // Populates .grad on every tensor reachable from the recorded ops.
  // loss must be a scalar produced under this tape.
  void backward(const Tensor& loss);

  size_t num_ops() const { return records_.size(); }
  void clear();

 private:
  struct Record {
    std::function<void()> backward_fn;
  };
  std::vector<Record> records_;
  std::vector<std::shared_ptr<detail::TensorImpl>> touched_;
  bool recording_ = true;
};

// ---- elementwise and shape ops (all differentiable unless noted) ----
Tensor add(Tape& tp, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tp, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tp, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tp, const Tensor& a, double s);
Tensor relu(Tape& tp, const Tensor& a);
Tensor gelu(Tape& tp, const Tensor& a);  // tanh approximation

// b's shape must equal the trailing dimensions of a; broadcast over the
// leading (batch) dimensions.
Tensor add_rowwise(Tape& tp, const Tensor& a, const Tensor& b);
Tensor mul_rowwise(Tape& tp, const Tensor& a, const Tensor& b);

// mask has a's shape with entries in {0,1}; entries where mask==1 are replaced
// by fill_value. Gradient flows only through the untouched entries.
Tensor mask_fill(Tape& tp, const Tensor& a, const Tensor& mask, double fill_value);

Tensor reshape(Tape& tp, const Tensor& a, const Shape& shape);
Tensor transpose(Tape& tp, const Tensor& a, const std::vector<int>& perm);
Tensor concat(Tape& tp, const std::vector<Tensor>& xs, int axis);
Tensor slice(Tape& tp, const Tensor& a, int axis, int start, int len);

Tensor reduce_sum(Tape& tp, const Tensor& a, int axis);
Tensor reduce_mean(Tape& tp, const Tensor& a, int axis);
Tensor reduce_sum_all(Tape& tp, const Tensor& a);
Tensor reduce_mean_all(Tape& tp, const Tensor& a);

Tensor softmax(Tape& tp, const Tensor& a, int axis);
// RMS normalization without learnable scale; exact RMS-1 on nonzero slices,
// all-zero slices get an epsilon under the root and map to zeros.
Tensor rms_norm(Tape& tp, const Tensor& a, int axis);
// Zero-mean unit-variance along axis (pre-affine), epsilon 1e-6.
Tensor layer_norm(Tape& tp, const Tensor& a, int axis);

// Generalized two-operand index contraction, e.g. "hqd,hkd->hqk".
// Labels are single characters, distinct within an operand; every input label
// must appear in the output or in the other operand (no implicit broadcast).
// Lowered to batched GEMM.
Tensor contract(Tape& tp, const Tensor& a, const Tensor& b, const std::string& spec);

// ---- losses ----
Tensor mse(Tape& tp, const Tensor& pred, const Tensor& target);
// -log softmax(logits)[class_index]; logits is a vector
Tensor cross_entropy_logits(Tape& tp, const Tensor& logits, int class_index);
// logits [N, C], targets per row; returns the mean over rows
Tensor cross_entropy_rows(Tape& tp, const Tensor& logits, const std::vector<int>& classes);

constexpr double kMaskNegInf = -1e30;

}  // namespace hyla
