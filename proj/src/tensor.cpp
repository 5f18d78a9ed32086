#include "hyla/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace hyla {

namespace {

MatmulPrecision g_matmul_precision = MatmulPrecision::f64;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int normalize_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  check(axis >= 0 && axis < ndim,
        std::string(op) + ": axis out of range for ndim " + std::to_string(ndim));
  return axis;
}

// (outer, n, inner) decomposition around an axis
struct AxisSplit {
  size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s{1, static_cast<size_t>(shape[static_cast<size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) s.outer *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    s.inner *= static_cast<size_t>(shape[i]);
  return s;
}

std::shared_ptr<detail::TensorImpl> make_impl(const Shape& shape, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  for (int d : shape) check(d >= 0, "tensor extent must be non-negative");
  impl->shape = shape;
  impl->value.assign(shape_numel(shape), 0.0);
  impl->requires_grad = requires_grad;
  return impl;
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

size_t shape_numel(const Shape& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void set_matmul_precision(MatmulPrecision p) { g_matmul_precision = p; }
MatmulPrecision matmul_precision() { return g_matmul_precision; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_impl(shape, requires_grad));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  Tensor t(make_impl(shape, requires_grad));
  std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  check(shape_numel(shape) == data.size(),
        "from_data: " + std::to_string(data.size()) + " values do not fill shape " +
            shape_str(shape));
  Tensor t(make_impl(shape, requires_grad));
  t.impl_->value = std::move(data);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Tensor t(make_impl({}, requires_grad));
  t.impl_->value[0] = v;
  return t;
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad) {
  Tensor t(make_impl(shape, requires_grad));
  for (auto& v : t.impl_->value) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(const Shape& shape, Rng& rng, double std, bool requires_grad) {
  Tensor t(make_impl(shape, requires_grad));
  for (auto& v : t.impl_->value) v = std * rng.normal();
  return t;
}

Tensor Tensor::one_hot(int index, int depth) {
  check(depth > 0, "one_hot: depth must be positive");
  check(index >= 0 && index < depth, "one_hot: index " + std::to_string(index) +
                                         " out of range for depth " + std::to_string(depth));
  Tensor t = zeros({depth});
  t[static_cast<size_t>(index)] = 1.0;
  return t;
}

double Tensor::item() const {
  check(impl_ && impl_->value.size() == 1, "item: tensor is not a scalar");
  return impl_->value[0];
}

Tensor Tensor::grad() const {
  Tensor g = zeros(impl_->shape);
  if (impl_->grad.size() == impl_->value.size()) g.impl_->value = impl_->grad;
  return g;
}

bool Tensor::all_finite() const {
  for (double v : impl_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::record(std::function<void()> backward_fn, std::vector<Tensor> touched) {
  records_.push_back({std::move(backward_fn)});
  for (const Tensor& t : touched) touched_.push_back(t.impl());
}

void Tape::backward(const Tensor& loss) {
  check(loss.defined() && loss.size() == 1, "backward: loss must be a scalar tensor");
  std::unordered_set<detail::TensorImpl*> seen;
  for (auto& impl : touched_) {
    if (seen.insert(impl.get()).second) {
      impl->grad.assign(impl->value.size(), 0.0);
    }
  }
  auto loss_impl = loss.impl();
  if (loss_impl->grad.size() != 1) loss_impl->grad.assign(1, 0.0);
  loss_impl->grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward_fn();
}

void Tape::clear() {
  records_.clear();
  touched_.clear();
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

bool want_grad(const Tape& tp, const Tensor& a) { return tp.recording() && a.requires_grad(); }

using Impl = std::shared_ptr<detail::TensorImpl>;

}  // namespace

Tensor add(Tape& tp, const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (want_grad(tp, a) || want_grad(tp, b)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    tp.record(
        [ai, bi, oi]() {
          if (ai->requires_grad) accumulate(ai->grad, oi->grad);
          if (bi->requires_grad) accumulate(bi->grad, oi->grad);
        },
        {a, b, out});
  }
  return out;
}

Tensor sub(Tape& tp, const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  if (want_grad(tp, a) || want_grad(tp, b)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    tp.record(
        [ai, bi, oi]() {
          if (ai->requires_grad) accumulate(ai->grad, oi->grad);
          if (bi->requires_grad)
            for (size_t i = 0; i < bi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
        },
        {a, b, out});
  }
  return out;
}

Tensor mul(Tape& tp, const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (want_grad(tp, a) || want_grad(tp, b)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    tp.record(
        [ai, bi, oi]() {
          if (ai->requires_grad)
            for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->value[i];
          if (bi->requires_grad)
            for (size_t i = 0; i < bi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->value[i];
        },
        {a, b, out});
  }
  return out;
}

Tensor scale(Tape& tp, const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi, s]() {
          for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i] * s;
        },
        {a, out});
  }
  return out;
}

Tensor relu(Tape& tp, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi]() {
          for (size_t i = 0; i < ai->grad.size(); ++i)
            if (ai->value[i] > 0.0) ai->grad[i] += oi->grad[i];
        },
        {a, out});
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(Tape& tp, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi]() {
          for (size_t i = 0; i < ai->grad.size(); ++i) {
            double x = ai->value[i];
            double u = kGeluC * (x + kGeluA * x * x * x);
            double t = std::tanh(u);
            double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            ai->grad[i] += oi->grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
          }
        },
        {a, out});
  }
  return out;
}

namespace {

void check_rowwise(const char* op, const Tensor& a, const Tensor& b) {
  check(b.ndim() <= a.ndim(), std::string(op) + ": rhs rank exceeds lhs rank");
  int off = a.ndim() - b.ndim();
  for (int i = 0; i < b.ndim(); ++i)
    check(a.dim(off + i) == b.dim(i),
          std::string(op) + ": trailing shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

}  // namespace

Tensor add_rowwise(Tape& tp, const Tensor& a, const Tensor& b) {
  check_rowwise("add_rowwise", a, b);
  size_t bs = b.size();
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i % bs];
  if (want_grad(tp, a) || want_grad(tp, b)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    tp.record(
        [ai, bi, oi, bs]() {
          if (ai->requires_grad) accumulate(ai->grad, oi->grad);
          if (bi->requires_grad)
            for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i % bs] += oi->grad[i];
        },
        {a, b, out});
  }
  return out;
}

Tensor mul_rowwise(Tape& tp, const Tensor& a, const Tensor& b) {
  check_rowwise("mul_rowwise", a, b);
  size_t bs = b.size();
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i % bs];
  if (want_grad(tp, a) || want_grad(tp, b)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    tp.record(
        [ai, bi, oi, bs]() {
          if (ai->requires_grad)
            for (size_t i = 0; i < oi->grad.size(); ++i)
              ai->grad[i] += oi->grad[i] * bi->value[i % bs];
          if (bi->requires_grad)
            for (size_t i = 0; i < oi->grad.size(); ++i)
              bi->grad[i % bs] += oi->grad[i] * ai->value[i];
        },
        {a, b, out});
  }
  return out;
}

Tensor mask_fill(Tape& tp, const Tensor& a, const Tensor& mask, double fill_value) {
  check_same_shape("mask_fill", a, mask);
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = mask[i] != 0.0 ? fill_value : a[i];
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), mi = mask.impl(), oi = out.impl();
    tp.record(
        [ai, mi, oi]() {
          for (size_t i = 0; i < ai->grad.size(); ++i)
            if (mi->value[i] == 0.0) ai->grad[i] += oi->grad[i];
        },
        {a, mask, out});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(Tape& tp, const Tensor& a, const Shape& shape) {
  check(shape_numel(shape) == a.size(), "reshape: element count mismatch " +
                                            shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out = Tensor::zeros(shape);
  out.values() = a.values();
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record([ai, oi]() { accumulate(ai->grad, oi->grad); }, {a, out});
  }
  return out;
}

namespace {

// dst multi-index runs over dst_shape; src index = sum dst_idx[i] * src_stride_for_dst_axis[i]
void permute_into(const double* src, double* dst, const Shape& src_shape,
                  const std::vector<int>& perm) {
  int nd = static_cast<int>(src_shape.size());
  std::vector<size_t> src_strides(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i)
    src_strides[static_cast<size_t>(i)] =
        src_strides[static_cast<size_t>(i + 1)] * static_cast<size_t>(src_shape[static_cast<size_t>(i + 1)]);
  Shape dst_shape(static_cast<size_t>(nd));
  std::vector<size_t> stride_map(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    dst_shape[static_cast<size_t>(i)] = src_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    stride_map[static_cast<size_t>(i)] = src_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  size_t total = shape_numel(dst_shape);
  if (total == 0) return;
  std::vector<int> idx(static_cast<size_t>(nd), 0);
  size_t src_off = 0;
  for (size_t out_i = 0; out_i < total; ++out_i) {
    dst[out_i] = src[src_off];
    for (int ax = nd - 1; ax >= 0; --ax) {
      size_t uax = static_cast<size_t>(ax);
      idx[uax]++;
      src_off += stride_map[uax];
      if (idx[uax] < dst_shape[uax]) break;
      src_off -= stride_map[uax] * static_cast<size_t>(dst_shape[uax]);
      idx[uax] = 0;
    }
  }
}

// dst[perm-applied] += src, i.e. scatter src (laid out in dst_shape order) back into src_shape order
void permute_accumulate(const double* src, double* dst, const Shape& dst_shape,
                        const std::vector<int>& perm_of_dst) {
  // src has shape dst_shape permuted by perm_of_dst; walk src linearly, accumulate into dst.
  int nd = static_cast<int>(dst_shape.size());
  std::vector<size_t> dst_strides(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i)
    dst_strides[static_cast<size_t>(i)] =
        dst_strides[static_cast<size_t>(i + 1)] * static_cast<size_t>(dst_shape[static_cast<size_t>(i + 1)]);
  Shape src_shape(static_cast<size_t>(nd));
  std::vector<size_t> stride_map(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    src_shape[static_cast<size_t>(i)] = dst_shape[static_cast<size_t>(perm_of_dst[static_cast<size_t>(i)])];
    stride_map[static_cast<size_t>(i)] = dst_strides[static_cast<size_t>(perm_of_dst[static_cast<size_t>(i)])];
  }
  size_t total = shape_numel(src_shape);
  if (total == 0) return;
  std::vector<int> idx(static_cast<size_t>(nd), 0);
  size_t dst_off = 0;
  for (size_t src_i = 0; src_i < total; ++src_i) {
    dst[dst_off] += src[src_i];
    for (int ax = nd - 1; ax >= 0; --ax) {
      size_t uax = static_cast<size_t>(ax);
      idx[uax]++;
      dst_off += stride_map[uax];
      if (idx[uax] < src_shape[uax]) break;
      dst_off -= stride_map[uax] * static_cast<size_t>(src_shape[uax]);
      idx[uax] = 0;
    }
  }
}

}  // namespace

Tensor transpose(Tape& tp, const Tensor& a, const std::vector<int>& perm) {
  check(static_cast<int>(perm.size()) == a.ndim(), "transpose: perm length mismatch");
  std::vector<bool> used(perm.size(), false);
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    int p = perm[i];
    check(p >= 0 && p < a.ndim() && !used[static_cast<size_t>(p)], "transpose: invalid permutation");
    used[static_cast<size_t>(p)] = true;
    out_shape[i] = a.dim(p);
  }
  Tensor out = Tensor::zeros(out_shape);
  permute_into(a.data(), out.data(), a.shape(), perm);
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    std::vector<int> perm_copy = perm;
    tp.record(
        [ai, oi, perm_copy]() {
          permute_accumulate(oi->grad.data(), ai->grad.data(), ai->shape, perm_copy);
        },
        {a, out});
  }
  return out;
}

Tensor concat(Tape& tp, const std::vector<Tensor>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  int nd = xs[0].ndim();
  axis = normalize_axis(axis, nd, "concat");
  Shape out_shape = xs[0].shape();
  int total_axis = 0;
  for (const Tensor& x : xs) {
    check(x.ndim() == nd, "concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis)
        check(x.dim(i) == out_shape[static_cast<size_t>(i)], "concat: off-axis shape mismatch");
    total_axis += x.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = total_axis;
  Tensor out = Tensor::zeros(out_shape);
  AxisSplit os = split_axis(out_shape, axis);
  size_t pos = 0;
  bool any_grad = false;
  struct Piece {
    Impl impl;
    size_t off, n;
  };
  std::vector<Piece> pieces;
  for (const Tensor& x : xs) {
    AxisSplit s = split_axis(x.shape(), axis);
    for (size_t o = 0; o < s.outer; ++o)
      std::memcpy(out.data() + (o * os.n + pos) * os.inner, x.data() + o * s.n * s.inner,
                  s.n * s.inner * sizeof(double));
    pieces.push_back({x.impl(), pos, s.n});
    pos += s.n;
    any_grad = any_grad || want_grad(tp, x);
  }
  if (any_grad) {
    out.set_requires_grad(true);
    Impl oi = out.impl();
    std::vector<Tensor> touched = xs;
    touched.push_back(out);
    tp.record(
        [oi, pieces, os]() {
          for (const Piece& p : pieces) {
            if (!p.impl->requires_grad) continue;
            for (size_t o = 0; o < os.outer; ++o)
              for (size_t j = 0; j < p.n * os.inner; ++j)
                p.impl->grad[o * p.n * os.inner + j] += oi->grad[(o * os.n + p.off) * os.inner + j];
          }
        },
        std::move(touched));
  }
  return out;
}

Tensor slice(Tape& tp, const Tensor& a, int axis, int start, int len) {
  axis = normalize_axis(axis, a.ndim(), "slice");
  check(start >= 0 && len >= 0 && start + len <= a.dim(axis), "slice: range out of bounds");
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out = Tensor::zeros(out_shape);
  AxisSplit s = split_axis(a.shape(), axis);
  for (size_t o = 0; o < s.outer; ++o)
    std::memcpy(out.data() + o * static_cast<size_t>(len) * s.inner,
                a.data() + (o * s.n + static_cast<size_t>(start)) * s.inner,
                static_cast<size_t>(len) * s.inner * sizeof(double));
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi, s, start, len]() {
          for (size_t o = 0; o < s.outer; ++o)
            for (size_t j = 0; j < static_cast<size_t>(len) * s.inner; ++j)
              ai->grad[(o * s.n + static_cast<size_t>(start)) * s.inner + j] +=
                  oi->grad[o * static_cast<size_t>(len) * s.inner + j];
        },
        {a, out});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor reduce_sum(Tape& tp, const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.ndim(), "reduce_sum");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor out = Tensor::zeros(out_shape);
  AxisSplit s = split_axis(a.shape(), axis);
  for (size_t o = 0; o < s.outer; ++o)
    for (size_t j = 0; j < s.n; ++j)
      for (size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += a[(o * s.n + j) * s.inner + i];
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi, s]() {
          for (size_t o = 0; o < s.outer; ++o)
            for (size_t j = 0; j < s.n; ++j)
              for (size_t i = 0; i < s.inner; ++i)
                ai->grad[(o * s.n + j) * s.inner + i] += oi->grad[o * s.inner + i];
        },
        {a, out});
  }
  return out;
}

Tensor reduce_mean(Tape& tp, const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.ndim(), "reduce_mean");
  check(a.dim(axis) > 0, "reduce_mean: empty axis");
  Tensor s = reduce_sum(tp, a, axis);
  return scale(tp, s, 1.0 / a.dim(axis));
}

Tensor reduce_sum_all(Tape& tp, const Tensor& a) {
  Tensor out = Tensor::zeros({});
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i];
  out[0] = acc;
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi]() {
          for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[0];
        },
        {a, out});
  }
  return out;
}

Tensor reduce_mean_all(Tape& tp, const Tensor& a) {
  check(a.size() > 0, "reduce_mean_all: empty tensor");
  return scale(tp, reduce_sum_all(tp, a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

Tensor softmax(Tape& tp, const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.ndim(), "softmax");
  Tensor out = Tensor::zeros(a.shape());
  AxisSplit s = split_axis(a.shape(), axis);
  for (size_t o = 0; o < s.outer; ++o)
    for (size_t i = 0; i < s.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t j = 0; j < s.n; ++j) mx = std::max(mx, a[(o * s.n + j) * s.inner + i]);
      double denom = 0.0;
      for (size_t j = 0; j < s.n; ++j) {
        double e = std::exp(a[(o * s.n + j) * s.inner + i] - mx);
        out[(o * s.n + j) * s.inner + i] = e;
        denom += e;
      }
      for (size_t j = 0; j < s.n; ++j) out[(o * s.n + j) * s.inner + i] /= denom;
    }
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi, s]() {
          // dx = y * (dy - sum(dy*y))
          for (size_t o = 0; o < s.outer; ++o)
            for (size_t i = 0; i < s.inner; ++i) {
              double dot = 0.0;
              for (size_t j = 0; j < s.n; ++j) {
                size_t idx = (o * s.n + j) * s.inner + i;
                dot += oi->grad[idx] * oi->value[idx];
              }
              for (size_t j = 0; j < s.n; ++j) {
                size_t idx = (o * s.n + j) * s.inner + i;
                ai->grad[idx] += oi->value[idx] * (oi->grad[idx] - dot);
              }
            }
        },
        {a, out});
  }
  return out;
}

namespace {
constexpr double kRmsEps = 1e-6;
constexpr double kLayerNormEps = 1e-6;
}  // namespace

Tensor rms_norm(Tape& tp, const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.ndim(), "rms_norm");
  check(a.dim(axis) > 0, "rms_norm: empty axis");
  Tensor out = Tensor::zeros(a.shape());
  AxisSplit s = split_axis(a.shape(), axis);
  // The epsilon only enters for all-zero slices, so nonzero slices come out at
  // exactly RMS 1 (up to roundoff).
  for (size_t o = 0; o < s.outer; ++o)
    for (size_t i = 0; i < s.inner; ++i) {
      double ms = 0.0;
      for (size_t j = 0; j < s.n; ++j) {
        double v = a[(o * s.n + j) * s.inner + i];
        ms += v * v;
      }
      ms /= static_cast<double>(s.n);
      double r = ms > 0.0 ? std::sqrt(ms) : std::sqrt(kRmsEps);
      for (size_t j = 0; j < s.n; ++j)
        out[(o * s.n + j) * s.inner + i] = a[(o * s.n + j) * s.inner + i] / r;
    }
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi, s]() {
          // dx_j = dy_j / r - x_j / (n r^3) * sum_i dy_i x_i  (r > 0 branch)
          double n = static_cast<double>(s.n);
          for (size_t o = 0; o < s.outer; ++o)
            for (size_t i = 0; i < s.inner; ++i) {
              double ms = 0.0, dot = 0.0;
              for (size_t j = 0; j < s.n; ++j) {
                size_t idx = (o * s.n + j) * s.inner + i;
                ms += ai->value[idx] * ai->value[idx];
                dot += oi->grad[idx] * ai->value[idx];
              }
              ms /= n;
              double r = ms > 0.0 ? std::sqrt(ms) : std::sqrt(kRmsEps);
              double r3 = r * r * r;
              for (size_t j = 0; j < s.n; ++j) {
                size_t idx = (o * s.n + j) * s.inner + i;
                ai->grad[idx] += oi->grad[idx] / r - ai->value[idx] * dot / (n * r3);
              }
            }
        },
        {a, out});
  }
  return out;
}

Tensor layer_norm(Tape& tp, const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.ndim(), "layer_norm");
  check(a.dim(axis) > 0, "layer_norm: empty axis");
  Tensor out = Tensor::zeros(a.shape());
  AxisSplit s = split_axis(a.shape(), axis);
  double n = static_cast<double>(s.n);
  for (size_t o = 0; o < s.outer; ++o)
    for (size_t i = 0; i < s.inner; ++i) {
      double mean = 0.0;
      for (size_t j = 0; j < s.n; ++j) mean += a[(o * s.n + j) * s.inner + i];
      mean /= n;
      double var = 0.0;
      for (size_t j = 0; j < s.n; ++j) {
        double d = a[(o * s.n + j) * s.inner + i] - mean;
        var += d * d;
      }
      var /= n;
      double istd = 1.0 / std::sqrt(var + kLayerNormEps);
      for (size_t j = 0; j < s.n; ++j)
        out[(o * s.n + j) * s.inner + i] = (a[(o * s.n + j) * s.inner + i] - mean) * istd;
    }
  if (want_grad(tp, a)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), oi = out.impl();
    tp.record(
        [ai, oi, s]() {
          double n = static_cast<double>(s.n);
          for (size_t o = 0; o < s.outer; ++o)
            for (size_t i = 0; i < s.inner; ++i) {
              double mean = 0.0;
              for (size_t j = 0; j < s.n; ++j) mean += ai->value[(o * s.n + j) * s.inner + i];
              mean /= n;
              double var = 0.0;
              for (size_t j = 0; j < s.n; ++j) {
                double d = ai->value[(o * s.n + j) * s.inner + i] - mean;
                var += d * d;
              }
              var /= n;
              double istd = 1.0 / std::sqrt(var + kLayerNormEps);
              double sum_dy = 0.0, sum_dy_xhat = 0.0;
              for (size_t j = 0; j < s.n; ++j) {
                size_t idx = (o * s.n + j) * s.inner + i;
                double xhat = (ai->value[idx] - mean) * istd;
                sum_dy += oi->grad[idx];
                sum_dy_xhat += oi->grad[idx] * xhat;
              }
              for (size_t j = 0; j < s.n; ++j) {
                size_t idx = (o * s.n + j) * s.inner + i;
                double xhat = (ai->value[idx] - mean) * istd;
                ai->grad[idx] +=
                    (istd / n) * (n * oi->grad[idx] - sum_dy - xhat * sum_dy_xhat);
              }
            }
        },
        {a, out});
  }
  return out;
}

// ---------------------------------------------------------------------------
// contract: two-operand einsum lowered to batched GEMM
// ---------------------------------------------------------------------------

namespace {

struct EinsumSpec {
  std::string a, b, out;
};

EinsumSpec parse_spec(const std::string& spec) {
  auto comma = spec.find(',');
  auto arrow = spec.find("->");
  check(comma != std::string::npos && arrow != std::string::npos && comma < arrow,
        "contract: malformed spec '" + spec + "' (expected \"ab,bc->ac\")");
  EinsumSpec s;
  s.a = spec.substr(0, comma);
  s.b = spec.substr(comma + 1, arrow - comma - 1);
  s.out = spec.substr(arrow + 2);
  for (const std::string* part : {&s.a, &s.b, &s.out})
    for (char c : *part)
      check(std::isalpha(static_cast<unsigned char>(c)),
            "contract: labels must be letters in '" + spec + "'");
  return s;
}

bool contains(const std::string& s, char c) { return s.find(c) != std::string::npos; }

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* A, const double* B,
          double* C) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    std::fill(C, C + static_cast<size_t>(m) * static_cast<size_t>(n), 0.0);
    return;
  }
  int lda = trans_a ? m : k;
  int ldb = trans_b ? k : n;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, A, lda, B, ldb, 0.0, C, n);
}

void gemm_f32(bool trans_a, bool trans_b, int m, int n, int k, const float* A, const float* B,
              float* C) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    std::fill(C, C + static_cast<size_t>(m) * static_cast<size_t>(n), 0.0f);
    return;
  }
  int lda = trans_a ? m : k;
  int ldb = trans_b ? k : n;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, A, lda, B, ldb, 0.0f, C, n);
}

// Core routine shared by forward and the two backward contractions.
std::vector<double> einsum2(const std::vector<double>& a_vals, const Shape& a_shape,
                            const std::vector<double>& b_vals, const Shape& b_shape,
                            const EinsumSpec& s, Shape* out_shape_out) {
  check(s.a.size() == a_shape.size(),
        "contract: lhs has " + std::to_string(a_shape.size()) + " dims but spec lists " +
            std::to_string(s.a.size()));
  check(s.b.size() == b_shape.size(),
        "contract: rhs has " + std::to_string(b_shape.size()) + " dims but spec lists " +
            std::to_string(s.b.size()));

  std::unordered_map<char, int> dims;
  for (size_t i = 0; i < s.a.size(); ++i) {
    char c = s.a[i];
    check(s.a.find(c) == i, std::string("contract: repeated label '") + c + "' in lhs");
    dims[c] = a_shape[i];
  }
  for (size_t i = 0; i < s.b.size(); ++i) {
    char c = s.b[i];
    check(s.b.find(c) == i, std::string("contract: repeated label '") + c + "' in rhs");
    auto it = dims.find(c);
    if (it != dims.end())
      check(it->second == b_shape[i], std::string("contract: extent mismatch on label '") + c +
                                          "': " + std::to_string(it->second) + " vs " +
                                          std::to_string(b_shape[i]));
    else
      dims[c] = b_shape[i];
  }
  for (size_t i = 0; i < s.out.size(); ++i) {
    char c = s.out[i];
    check(s.out.find(c) == i, std::string("contract: repeated label '") + c + "' in output");
    check(dims.count(c), std::string("contract: output label '") + c + "' missing from inputs");
  }

  // classify labels
  std::string batch, mg, ng, kg;
  for (char c : s.out) {
    bool in_a = contains(s.a, c), in_b = contains(s.b, c);
    if (in_a && in_b)
      batch += c;
    else if (in_a)
      mg += c;
    else
      ng += c;
  }
  for (char c : s.a) {
    if (!contains(s.out, c)) {
      check(contains(s.b, c), std::string("contract: label '") + c +
                                  "' appears only in lhs; implicit broadcast is not supported");
      kg += c;
    }
  }
  for (char c : s.b)
    check(contains(s.out, c) || contains(s.a, c),
          std::string("contract: label '") + c +
              "' appears only in rhs; implicit broadcast is not supported");

  auto group_numel = [&](const std::string& g) {
    long long n = 1;
    for (char c : g) n *= dims[c];
    return n;
  };
  long long B = group_numel(batch), M = group_numel(mg), N = group_numel(ng), K = group_numel(kg);

  Shape out_shape;
  for (char c : s.out) out_shape.push_back(dims[c]);
  if (out_shape_out) *out_shape_out = out_shape;
  std::vector<double> out_vals(shape_numel(out_shape), 0.0);
  if (out_vals.empty() || B == 0) return out_vals;

  // Arrange operand axes as [batch, M, K] / [batch, K, N] (or the transposed
  // panel orders, which GEMM handles in place).
  auto arrange = [&](const std::string& labels, const std::vector<double>& vals,
                     const Shape& shape, const std::string& rows, const std::string& cols,
                     std::vector<double>& storage, bool& trans) -> const double* {
    std::string no_trans = batch + rows + cols;
    std::string with_trans = batch + cols + rows;
    if (labels == no_trans) {
      trans = false;
      return vals.data();
    }
    if (labels == with_trans) {
      trans = true;
      return vals.data();
    }
    // materialize a permuted copy in no-trans order
    std::vector<int> perm;
    for (char c : no_trans) perm.push_back(static_cast<int>(labels.find(c)));
    storage.resize(vals.size());
    permute_into(vals.data(), storage.data(), shape, perm);
    trans = false;
    return storage.data();
  };

  std::vector<double> a_store, b_store;
  bool trans_a = false, trans_b = false;
  const double* a_ptr = arrange(s.a, a_vals, a_shape, mg, kg, a_store, trans_a);
  const double* b_ptr = arrange(s.b, b_vals, b_shape, kg, ng, b_store, trans_b);

  // GEMM result in [batch, M, N]; permute to the requested output order if needed.
  std::string canonical_out = batch + mg + ng;
  bool direct = (s.out == canonical_out);
  std::vector<double> gemm_out;
  double* c_ptr = direct ? out_vals.data() : (gemm_out.assign(out_vals.size(), 0.0), gemm_out.data());

  size_t a_panel = static_cast<size_t>(M) * static_cast<size_t>(K);
  size_t b_panel = static_cast<size_t>(K) * static_cast<size_t>(N);
  size_t c_panel = static_cast<size_t>(M) * static_cast<size_t>(N);

  if (g_matmul_precision == MatmulPrecision::f32) {
    std::vector<float> af(static_cast<size_t>(B) * a_panel), bf(static_cast<size_t>(B) * b_panel),
        cf(static_cast<size_t>(B) * c_panel);
    for (size_t i = 0; i < af.size(); ++i) af[i] = static_cast<float>(a_ptr[i]);
    for (size_t i = 0; i < bf.size(); ++i) bf[i] = static_cast<float>(b_ptr[i]);
    for (long long bi = 0; bi < B; ++bi)
      gemm_f32(trans_a, trans_b, static_cast<int>(M), static_cast<int>(N), static_cast<int>(K),
               af.data() + static_cast<size_t>(bi) * a_panel,
               bf.data() + static_cast<size_t>(bi) * b_panel,
               cf.data() + static_cast<size_t>(bi) * c_panel);
    for (size_t i = 0; i < cf.size(); ++i) c_ptr[i] = static_cast<double>(cf[i]);
  } else {
    for (long long bi = 0; bi < B; ++bi)
      gemm(trans_a, trans_b, static_cast<int>(M), static_cast<int>(N), static_cast<int>(K),
           a_ptr + static_cast<size_t>(bi) * a_panel, b_ptr + static_cast<size_t>(bi) * b_panel,
           c_ptr + static_cast<size_t>(bi) * c_panel);
  }

  if (!direct) {
    // gemm_out is in canonical_out order; permute into s.out order
    Shape canon_shape;
    for (char c : canonical_out) canon_shape.push_back(dims[c]);
    std::vector<int> perm;
    for (char c : s.out) perm.push_back(static_cast<int>(canonical_out.find(c)));
    permute_into(gemm_out.data(), out_vals.data(), canon_shape, perm);
  }
  return out_vals;
}

}  // namespace

Tensor contract(Tape& tp, const Tensor& a, const Tensor& b, const std::string& spec) {
  EinsumSpec s = parse_spec(spec);
  Shape out_shape;
  std::vector<double> out_vals = einsum2(a.values(), a.shape(), b.values(), b.shape(), s, &out_shape);
  Tensor out = Tensor::from_data(out_shape, std::move(out_vals));
  if (want_grad(tp, a) || want_grad(tp, b)) {
    out.set_requires_grad(true);
    Impl ai = a.impl(), bi = b.impl(), oi = out.impl();
    // d a = contract(d out, b) and d b = contract(a, d out) with swapped roles
    EinsumSpec grad_a{s.out, s.b, s.a};
    EinsumSpec grad_b{s.a, s.out, s.b};
    tp.record(
        [ai, bi, oi, grad_a, grad_b]() {
          if (ai->requires_grad) {
            std::vector<double> g =
                einsum2(oi->grad, oi->shape, bi->value, bi->shape, grad_a, nullptr);
            accumulate(ai->grad, g);
          }
          if (bi->requires_grad) {
            std::vector<double> g =
                einsum2(ai->value, ai->shape, oi->grad, oi->shape, grad_b, nullptr);
            accumulate(bi->grad, g);
          }
        },
        {a, b, out});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor mse(Tape& tp, const Tensor& pred, const Tensor& target) {
  check_same_shape("mse", pred, target);
  check(pred.size() > 0, "mse: empty tensors");
  Tensor out = Tensor::zeros({});
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - target[i];
    acc += d * d;
  }
  double n = static_cast<double>(pred.size());
  out[0] = acc / n;
  if (want_grad(tp, pred) || want_grad(tp, target)) {
    out.set_requires_grad(true);
    Impl pi = pred.impl(), ti = target.impl(), oi = out.impl();
    tp.record(
        [pi, ti, oi, n]() {
          double g = oi->grad[0] * 2.0 / n;
          if (pi->requires_grad)
            for (size_t i = 0; i < pi->grad.size(); ++i)
              pi->grad[i] += g * (pi->value[i] - ti->value[i]);
          if (ti->requires_grad)
            for (size_t i = 0; i < ti->grad.size(); ++i)
              ti->grad[i] -= g * (pi->value[i] - ti->value[i]);
        },
        {pred, target, out});
  }
  return out;
}

namespace {

// log-sum-exp and per-row cross entropy; shared by both CE entry points
double row_cross_entropy(const double* logits, size_t n, int cls, std::vector<double>* softmax_out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i]);
  double denom = 0.0;
  for (size_t i = 0; i < n; ++i) denom += std::exp(logits[i] - mx);
  double lse = mx + std::log(denom);
  if (softmax_out) {
    softmax_out->resize(n);
    for (size_t i = 0; i < n; ++i) (*softmax_out)[i] = std::exp(logits[i] - lse);
  }
  return lse - logits[static_cast<size_t>(cls)];
}

}  // namespace

Tensor cross_entropy_logits(Tape& tp, const Tensor& logits, int class_index) {
  check(logits.ndim() == 1, "cross_entropy_logits: logits must be a vector");
  check(class_index >= 0 && class_index < logits.dim(0),
        "cross_entropy_logits: class index " + std::to_string(class_index) +
            " out of range for " + std::to_string(logits.dim(0)) + " classes");
  Tensor out = Tensor::zeros({});
  out[0] = row_cross_entropy(logits.data(), logits.size(), class_index, nullptr);
  if (want_grad(tp, logits)) {
    out.set_requires_grad(true);
    Impl li = logits.impl(), oi = out.impl();
    tp.record(
        [li, oi, class_index]() {
          std::vector<double> sm;
          row_cross_entropy(li->value.data(), li->value.size(), class_index, &sm);
          for (size_t i = 0; i < li->grad.size(); ++i) {
            double g = sm[i] - (static_cast<int>(i) == class_index ? 1.0 : 0.0);
            li->grad[i] += oi->grad[0] * g;
          }
        },
        {logits, out});
  }
  return out;
}

Tensor cross_entropy_rows(Tape& tp, const Tensor& logits, const std::vector<int>& classes) {
  check(logits.ndim() == 2, "cross_entropy_rows: logits must be [rows, classes]");
  size_t rows = static_cast<size_t>(logits.dim(0)), cols = static_cast<size_t>(logits.dim(1));
  check(classes.size() == rows, "cross_entropy_rows: class count mismatch");
  for (int c : classes)
    check(c >= 0 && c < static_cast<int>(cols), "cross_entropy_rows: class index out of range");
  Tensor out = Tensor::zeros({});
  double acc = 0.0;
  for (size_t r = 0; r < rows; ++r)
    acc += row_cross_entropy(logits.data() + r * cols, cols, classes[r], nullptr);
  out[0] = acc / static_cast<double>(rows);
  if (want_grad(tp, logits)) {
    out.set_requires_grad(true);
    Impl li = logits.impl(), oi = out.impl();
    std::vector<int> cls = classes;
    tp.record(
        [li, oi, cls, rows, cols]() {
          double gscale = oi->grad[0] / static_cast<double>(rows);
          std::vector<double> sm;
          for (size_t r = 0; r < rows; ++r) {
            row_cross_entropy(li->value.data() + r * cols, cols, cls[r], &sm);
            for (size_t i = 0; i < cols; ++i) {
              double g = sm[i] - (static_cast<int>(i) == cls[r] ? 1.0 : 0.0);
              li->grad[r * cols + i] += gscale * g;
            }
          }
        },
        {logits, out});
  }
  return out;
}

}  // namespace hyla
