#include "pastn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "pastn/rng.hpp"

namespace pastn {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) strides[i - 1] = strides[i] * s[i];
  return strides;
}

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

ImplPtr make_impl(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return impl;
}

void accumulate(TensorImpl* t, std::size_t offset, double v) {
  t->ensure_grad();
  t->grad[offset] += v;
}

// Walks the output of a broadcast binary op in row-major order, handing the
// callback the flat output index together with the two input offsets.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t total = shape_numel(out);
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    f(flat, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;  // per-output-dim strides, 0 on broadcast dims
};

BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan plan;
  plan.out.resize(rank);
  plan.sa.assign(rank, 0);
  plan.sb.assign(rank, 0);
  auto stride_a = row_major_strides(a);
  auto stride_b = row_major_strides(b);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t out_d = rank - 1 - d;
    const std::size_t da = d < a.size() ? a[a.size() - 1 - d] : 1;
    const std::size_t db = d < b.size() ? b[b.size() - 1 - d] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes are not broadcast-compatible: " +
                       shape_str(a) + " vs " + shape_str(b));
    }
    plan.out[out_d] = std::max(da, db);
    if (da != 1) plan.sa[out_d] = stride_a[a.size() - 1 - d];
    if (db != 1) plan.sb[out_d] = stride_b[b.size() - 1 - d];
  }
  return plan;
}

bool want_grad(const Tensor& t) { return t.requires_grad(); }

template <typename... Ts>
bool track(const Ts&... ts) {
  return Tape::recording() && (want_grad(ts) || ...);
}

// fwd(a_val, b_val) -> out_val; bwd(a_val, b_val, dy) -> pair(da, db)
template <typename Fwd, typename Bwd>
Tensor broadcast_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  BroadcastPlan plan = broadcast_plan(name, a.shape(), b.shape());
  Tensor out = wrap_impl(make_impl(plan.out, false));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for_each_broadcast(plan.out, plan.sa, plan.sb,
                     [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       po[o] = fwd(pa[ia], pb[ib]);
                     });
  if (track(a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    auto oi = out.impl_ptr();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    Tape::active()->record([ai, bi, oi, plan, bwd, ga, gb]() {
      if (oi->grad.empty()) return;
      const double* pda = ai->data.data();
      const double* pdb = bi->data.data();
      const double* pdy = oi->grad.data();
      if (ga) ai->ensure_grad();
      if (gb) bi->ensure_grad();
      for_each_broadcast(plan.out, plan.sa, plan.sb,
                         [&](std::size_t o, std::size_t ia, std::size_t ib) {
                           auto [da, db] = bwd(pda[ia], pdb[ib], pdy[o]);
                           if (ga) ai->grad[ia] += da;
                           if (gb) bi->grad[ib] += db;
                         });
    });
  }
  return out;
}

// fwd(x) -> y; dydx(x, y) -> local derivative
template <typename Fwd, typename Dydx>
Tensor unary(const Tensor& x, Fwd fwd, Dydx dydx) {
  Tensor out = wrap_impl(make_impl(x.shape(), false));
  const double* px = x.data().data();
  double* po = out.data().data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::active()->record([xi, oi, dydx]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const std::size_t m = xi->data.size();
      for (std::size_t i = 0; i < m; ++i) {
        xi->grad[i] += dydx(xi->data[i], oi->data[i]) * oi->grad[i];
      }
    });
  }
  return out;
}

void check_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return wrap_impl(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_data: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap_impl(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.impl_->data) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.impl_->data) v = rng.normal(mean, stddev);
  return t;
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
  Tensor t = zeros({n, n}, requires_grad);
  for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != rank()) {
    throw IndexError("at: expected " + std::to_string(rank()) + " indices");
  }
  auto strides = row_major_strides(shape());
  std::size_t off = 0, d = 0;
  for (std::size_t i : idx) {
    if (i >= impl_->shape[d]) throw IndexError("at: index out of range in dim " + std::to_string(d));
    off += i * strides[d];
    ++d;
  }
  return impl_->data[off];
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw ContractError("grad: no gradient present on tensor " + shape_str(shape()));
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor::from_data(shape(), std::vector<double>(impl_->data), false);
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::recording() { return g_active_tape != nullptr; }

void Tape::record(std::function<void()> backward_step) {
  nodes_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss was not recorded on the tape");
  }
  if (used_) {
    throw ContractError("backward: tape already replayed");
  }
  used_ = true;
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double dy) { return std::pair<double, double>(dy, dy); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double dy) { return std::pair<double, double>(dy, -dy); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double dy) { return std::pair<double, double>(dy * y, dy * x); });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ValueError("dropout: probability must lie in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout: training mode requires an rng stream");
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (double& m : *mask) m = rng->uniform() < p ? 0.0 : keep_scale;
  Tensor out = wrap_impl(make_impl(x.shape(), false));
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i) po[i] = px[i] * (*mask)[i];
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::active()->record([xi, oi, mask]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor out = Tensor::from_data(std::move(new_shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::active()->record([xi, oi]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw ShapeError("permute: axes count must equal rank");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw ValueError("permute: axes must be a permutation");
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = x.dim(axes[d]);
  auto in_strides = row_major_strides(x.shape());
  // stride in the input for a step along output dim d
  std::vector<std::size_t> step(rank);
  for (std::size_t d = 0; d < rank; ++d) step[d] = in_strides[axes[d]];

  Tensor out = wrap_impl(make_impl(out_shape, false));
  const double* px = x.data().data();
  double* po = out.data().data();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in_off = 0;
  const std::size_t total = x.numel();
  for (std::size_t flat = 0; flat < total; ++flat) {
    po[flat] = px[in_off];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      in_off += step[d];
      if (idx[d] < out_shape[d]) break;
      in_off -= step[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::active()->record([xi, oi, out_shape, step, rank]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      std::vector<std::size_t> j(rank, 0);
      std::size_t off = 0;
      const std::size_t n = oi->grad.size();
      for (std::size_t flat = 0; flat < n; ++flat) {
        xi->grad[off] += oi->grad[flat];
        for (std::size_t d = rank; d-- > 0;) {
          ++j[d];
          off += step[d];
          if (j[d] < out_shape[d]) break;
          off -= step[d] * out_shape[d];
          j[d] = 0;
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  check_rank("transpose", x, 2);
  return permute(x, {1, 0});
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank()) throw IndexError("slice: axis out of range");
  if (start + len > x.dim(axis) || len == 0) {
    throw IndexError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(x.dim(axis)));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t in_axis = x.dim(axis);

  Tensor out = wrap_impl(make_impl(out_shape, false));
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = px + (o * in_axis + start) * inner;
    double* dst = po + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::active()->record([xi, oi, outer, inner, in_axis, start, len]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        double* dst = xi->grad.data() + (o * in_axis + start) * inner;
        const double* src = oi->grad.data() + o * len * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ValueError("concat: needs at least one tensor");
  const Shape& base = parts[0].shape();
  if (axis >= base.size()) throw IndexError("concat: axis out of range");
  std::size_t axis_total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != base.size()) {
      throw ShapeError("concat: rank mismatch: " + shape_str(base) + " vs " + shape_str(t.shape()));
    }
    for (std::size_t d = 0; d < base.size(); ++d) {
      if (d != axis && t.dim(d) != base[d]) {
        throw ShapeError("concat: shapes disagree off-axis: " + shape_str(base) + " vs " +
                         shape_str(t.shape()));
      }
    }
    axis_total += t.dim(axis);
  }
  Shape out_shape = base;
  out_shape[axis] = axis_total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= base[d];
  for (std::size_t d = axis + 1; d < base.size(); ++d) inner *= base[d];

  Tensor out = wrap_impl(make_impl(out_shape, false));
  double* po = out.data().data();
  std::size_t offset = 0;
  for (const Tensor& t : parts) {
    const std::size_t la = t.dim(axis);
    const double* src = t.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(src + o * la * inner, src + (o + 1) * la * inner,
                po + (o * axis_total + offset) * inner);
    }
    offset += la;
  }
  bool any_grad = false;
  for (const Tensor& t : parts) any_grad = any_grad || t.requires_grad();
  if (Tape::recording() && any_grad) {
    out.set_requires_grad(true);
    std::vector<ImplPtr> impls;
    std::vector<std::size_t> lens;
    for (const Tensor& t : parts) {
      impls.push_back(t.impl_ptr());
      lens.push_back(t.dim(axis));
    }
    auto oi = out.impl_ptr();
    Tape::active()->record([impls, lens, oi, outer, inner, axis_total]() {
      if (oi->grad.empty()) return;
      std::size_t off = 0;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (impls[k]->requires_grad) {
          impls[k]->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = oi->grad.data() + (o * axis_total + off) * inner;
            double* dst = impls[k]->grad.data() + o * lens[k] * inner;
            for (std::size_t i = 0; i < lens[k] * inner; ++i) dst[i] += src[i];
          }
        }
        off += lens[k];
      }
    });
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::size_t parts) {
  if (axis >= x.rank()) throw IndexError("split: axis out of range");
  if (parts == 0 || x.dim(axis) % parts != 0) {
    throw ShapeError("split: extent " + std::to_string(x.dim(axis)) + " not divisible into " +
                     std::to_string(parts) + " parts");
  }
  const std::size_t each = x.dim(axis) / parts;
  std::vector<Tensor> out;
  out.reserve(parts);
  for (std::size_t k = 0; k < parts; ++k) out.push_back(slice(x, axis, k * each, each));
  return out;
}

// ---------------------------------------------------------------------------
// contractions

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank("matmul", a, 2);
  check_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = wrap_impl(make_impl({m, n}, false));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* brow = pb + l * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (track(a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    auto oi = out.impl_ptr();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    Tape::active()->record([ai, bi, oi, m, k, n, ga, gb]() {
      if (oi->grad.empty()) return;
      const double* dz = oi->grad.data();
      if (ga) {
        ai->ensure_grad();
        // dA = dZ * B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < k; ++l) {
            double acc = 0.0;
            const double* brow = bi->data.data() + l * n;
            const double* zrow = dz + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += zrow[j] * brow[j];
            ai->grad[i * k + l] += acc;
          }
        }
      }
      if (gb) {
        bi->ensure_grad();
        // dB = A^T * dZ
        for (std::size_t l = 0; l < k; ++l) {
          for (std::size_t i = 0; i < m; ++i) {
            const double av = ai->data[i * k + l];
            const double* zrow = dz + i * n;
            double* grow = bi->grad.data() + l * n;
            for (std::size_t j = 0; j < n; ++j) grow[j] += av * zrow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  check_rank("bmm", a, 3);
  check_rank("bmm", b, 3);
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != g || bk != k) {
    throw ShapeError("bmm: incompatible batch shapes: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = wrap_impl(make_impl({g, m, n}, false));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t q = 0; q < g; ++q) {
    const double* A = pa + q * m * k;
    const double* B = pb + q * (transpose_b ? n * k : k * n);
    double* O = po + q * m * n;
    if (!transpose_b) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const double av = A[i * k + l];
          for (std::size_t j = 0; j < n; ++j) O[i * n + j] += av * B[l * n + j];
        }
    } else {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t l = 0; l < k; ++l) acc += A[i * k + l] * B[j * k + l];
          O[i * n + j] = acc;
        }
    }
  }
  if (track(a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    auto oi = out.impl_ptr();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    Tape::active()->record([ai, bi, oi, g, m, k, n, transpose_b, ga, gb]() {
      if (oi->grad.empty()) return;
      if (ga) ai->ensure_grad();
      if (gb) bi->ensure_grad();
      for (std::size_t q = 0; q < g; ++q) {
        const double* A = ai->data.data() + q * m * k;
        const double* B = bi->data.data() + q * (transpose_b ? n * k : k * n);
        const double* dZ = oi->grad.data() + q * m * n;
        double* dA = ga ? ai->grad.data() + q * m * k : nullptr;
        double* dB = gb ? bi->grad.data() + q * (transpose_b ? n * k : k * n) : nullptr;
        if (!transpose_b) {
          // Z = A*B: dA += dZ*B^T, dB += A^T*dZ
          if (ga)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t l = 0; l < k; ++l) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += dZ[i * n + j] * B[l * n + j];
                dA[i * k + l] += acc;
              }
          if (gb)
            for (std::size_t l = 0; l < k; ++l)
              for (std::size_t i = 0; i < m; ++i) {
                const double av = A[i * k + l];
                for (std::size_t j = 0; j < n; ++j) dB[l * n + j] += av * dZ[i * n + j];
              }
        } else {
          // Z = A*B^T with B [n,k]: dA += dZ*B, dB += dZ^T*A
          if (ga)
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) {
                const double zv = dZ[i * n + j];
                for (std::size_t l = 0; l < k; ++l) dA[i * k + l] += zv * B[j * k + l];
              }
          if (gb)
            for (std::size_t j = 0; j < n; ++j)
              for (std::size_t i = 0; i < m; ++i) {
                const double zv = dZ[i * n + j];
                for (std::size_t l = 0; l < k; ++l) dB[j * k + l] += zv * A[i * k + l];
              }
        }
      }
    });
  }
  return out;
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_rank("conv1x1", x, 4);
  check_rank("conv1x1", w, 2);
  const std::size_t B = x.dim(0), C = x.dim(1), N = x.dim(2), T = x.dim(3);
  const std::size_t O = w.dim(0);
  if (w.dim(1) != C) {
    throw ShapeError("conv1x1: weight " + shape_str(w.shape()) + " does not match input channels of " +
                     shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != O)) {
    throw ShapeError("conv1x1: bias " + shape_str(bias.shape()) + " must be [" + std::to_string(O) + "]");
  }
  const std::size_t plane = N * T;
  Tensor out = wrap_impl(make_impl({B, O, N, T}, false));
  const double* px = x.data().data();
  const double* pw = w.data().data();
  double* po = out.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      double* dst = po + (b * O + o) * plane;
      if (has_bias) {
        const double bv = bias.data()[o];
        for (std::size_t i = 0; i < plane; ++i) dst[i] = bv;
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double wv = pw[o * C + c];
        const double* src = px + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += wv * src[i];
      }
    }
  }
  bool need = Tape::recording() &&
              (x.requires_grad() || w.requires_grad() || (has_bias && bias.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto wi = w.impl_ptr();
    auto oi = out.impl_ptr();
    ImplPtr bi = has_bias ? bias.impl_ptr() : nullptr;
    bool gx = x.requires_grad(), gw = w.requires_grad();
    bool gb = has_bias && bias.requires_grad();
    Tape::active()->record([xi, wi, bi, oi, B, C, O, plane, gx, gw, gb]() {
      if (oi->grad.empty()) return;
      if (gx) xi->ensure_grad();
      if (gw) wi->ensure_grad();
      if (gb) bi->ensure_grad();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < O; ++o) {
          const double* dz = oi->grad.data() + (b * O + o) * plane;
          if (gb) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += dz[i];
            bi->grad[o] += acc;
          }
          for (std::size_t c = 0; c < C; ++c) {
            const double* src = xi->data.data() + (b * C + c) * plane;
            if (gw) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += dz[i] * src[i];
              wi->grad[o * C + c] += acc;
            }
            if (gx) {
              const double wv = wi->data[o * C + c];
              double* dst = xi->grad.data() + (b * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) dst[i] += wv * dz[i];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor temporal_conv(const Tensor& x, const Tensor& w, std::size_t dilation) {
  check_rank("temporal_conv", x, 4);
  check_rank("temporal_conv", w, 3);
  if (dilation == 0) throw ValueError("temporal_conv: dilation must be positive");
  const std::size_t B = x.dim(0), Ci = x.dim(1), N = x.dim(2), T = x.dim(3);
  const std::size_t Co = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Ci) {
    throw ShapeError("temporal_conv: kernel " + shape_str(w.shape()) +
                     " does not match input channels of " + shape_str(x.shape()));
  }
  const std::size_t span = dilation * (K - 1);
  if (T <= span) {
    throw ShapeError("temporal_conv: sequence length " + std::to_string(T) +
                     " is shorter than the receptive field " + std::to_string(span + 1));
  }
  const std::size_t To = T - span;
  Tensor out = wrap_impl(make_impl({B, Co, N, To}, false));
  const double* px = x.data().data();
  const double* pw = w.data().data();
  double* po = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t n = 0; n < N; ++n) {
        double* dst = po + ((b * Co + co) * N + n) * To;
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const double* src = px + ((b * Ci + ci) * N + n) * T;
          for (std::size_t s = 0; s < K; ++s) {
            const double wv = pw[(co * Ci + ci) * K + s];
            const std::size_t tap = dilation * (K - 1 - s);
            for (std::size_t t = 0; t < To; ++t) dst[t] += wv * src[t + tap];
          }
        }
      }
  if (track(x, w)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto wi = w.impl_ptr();
    auto oi = out.impl_ptr();
    bool gx = x.requires_grad(), gw = w.requires_grad();
    Tape::active()->record([xi, wi, oi, B, Ci, Co, N, T, To, K, dilation, gx, gw]() {
      if (oi->grad.empty()) return;
      if (gx) xi->ensure_grad();
      if (gw) wi->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Co; ++co)
          for (std::size_t n = 0; n < N; ++n) {
            const double* dz = oi->grad.data() + ((b * Co + co) * N + n) * To;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const std::size_t xoff = ((b * Ci + ci) * N + n) * T;
              for (std::size_t s = 0; s < K; ++s) {
                const std::size_t tap = dilation * (K - 1 - s);
                if (gw) {
                  double acc = 0.0;
                  const double* src = xi->data.data() + xoff;
                  for (std::size_t t = 0; t < To; ++t) acc += dz[t] * src[t + tap];
                  wi->grad[(co * Ci + ci) * K + s] += acc;
                }
                if (gx) {
                  const double wv = wi->data[(co * Ci + ci) * K + s];
                  double* dst = xi->grad.data() + xoff;
                  for (std::size_t t = 0; t < To; ++t) dst[t + tap] += wv * dz[t];
                }
              }
            }
          }
    });
  }
  return out;
}

Tensor dilated_causal_conv(const Tensor& x, const Tensor& f, std::size_t dilation) {
  check_rank("dilated_causal_conv", x, 2);
  check_rank("dilated_causal_conv", f, 3);
  const std::size_t Ci = x.dim(0), T = x.dim(1), Co = f.dim(0);
  Tensor x4 = reshape(x, {1, Ci, 1, T});
  Tensor y4 = temporal_conv(x4, f, dilation);
  return reshape(y4, {Co, y4.dim(3)});
}

Tensor graph_propagate(const Tensor& x, const Tensor& p) {
  check_rank("graph_propagate", x, 4);
  check_rank("graph_propagate", p, 2);
  const std::size_t B = x.dim(0), C = x.dim(1), N = x.dim(2), T = x.dim(3);
  if (p.dim(0) != N || p.dim(1) != N) {
    throw ShapeError("graph_propagate: transition " + shape_str(p.shape()) +
                     " does not match node axis of " + shape_str(x.shape()));
  }
  Tensor out = wrap_impl(make_impl({B, C, N, T}, false));
  const double* px = x.data().data();
  const double* pp = p.data().data();
  double* po = out.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = px + (b * C + c) * N * T;
      double* oplane = po + (b * C + c) * N * T;
      for (std::size_t n = 0; n < N; ++n) {
        double* dst = oplane + n * T;
        for (std::size_t m = 0; m < N; ++m) {
          const double pv = pp[n * N + m];
          if (pv == 0.0) continue;
          const double* src = plane + m * T;
          for (std::size_t t = 0; t < T; ++t) dst[t] += pv * src[t];
        }
      }
    }
  if (track(x, p)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto pi = p.impl_ptr();
    auto oi = out.impl_ptr();
    bool gx = x.requires_grad(), gp = p.requires_grad();
    Tape::active()->record([xi, pi, oi, B, C, N, T, gx, gp]() {
      if (oi->grad.empty()) return;
      if (gx) xi->ensure_grad();
      if (gp) pi->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t base = (b * C + c) * N * T;
          const double* dz = oi->grad.data() + base;
          if (gx) {
            double* dx = xi->grad.data() + base;
            for (std::size_t n = 0; n < N; ++n) {
              const double* dzrow = dz + n * T;
              for (std::size_t m = 0; m < N; ++m) {
                const double pv = pi->data[n * N + m];
                if (pv == 0.0) continue;
                double* dxrow = dx + m * T;
                for (std::size_t t = 0; t < T; ++t) dxrow[t] += pv * dzrow[t];
              }
            }
          }
          if (gp) {
            const double* xv = xi->data.data() + base;
            for (std::size_t n = 0; n < N; ++n) {
              const double* dzrow = dz + n * T;
              for (std::size_t m = 0; m < N; ++m) {
                const double* xrow = xv + m * T;
                double acc = 0.0;
                for (std::size_t t = 0; t < T; ++t) acc += dzrow[t] * xrow[t];
                pi->grad[n * N + m] += acc;
              }
            }
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization / reductions

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw IndexError("softmax: axis out of range");
  const std::size_t L = x.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);

  Tensor out = wrap_impl(make_impl(x.shape(), false));
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * L * inner + i;
      double mx = px[base];
      for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, px[base + l * inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        const double e = std::exp(px[base + l * inner] - mx);
        po[base + l * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t l = 0; l < L; ++l) po[base + l * inner] *= inv;
    }
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::active()->record([xi, oi, outer, inner, L]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * L * inner + i;
          double dot = 0.0;
          for (std::size_t l = 0; l < L; ++l) {
            dot += oi->grad[base + l * inner] * oi->data[base + l * inner];
          }
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t k = base + l * inner;
            xi->grad[k] += oi->data[k] * (oi->grad[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: needs at least one axis");
  const std::size_t D = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != D || beta.rank() != 1 || beta.dim(0) != D) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(D) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / D;
  Tensor out = wrap_impl(make_impl(x.shape(), false));
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * D;
    double m = 0.0;
    for (std::size_t j = 0; j < D; ++j) m += row[j];
    m /= static_cast<double>(D);
    double v = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double c = row[j] - m;
      v += c * c;
    }
    v /= static_cast<double>(D);
    const double r_inv = 1.0 / std::sqrt(v + eps);
    (*rstd)[r] = r_inv;
    for (std::size_t j = 0; j < D; ++j) {
      const double h = (row[j] - m) * r_inv;
      (*xhat)[r * D + j] = h;
      po[r * D + j] = h * pg[j] + pb[j];
    }
  }
  if (track(x, gamma, beta)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto gi = gamma.impl_ptr();
    auto bi = beta.impl_ptr();
    auto oi = out.impl_ptr();
    bool gx = x.requires_grad(), gg = gamma.requires_grad(), gb = beta.requires_grad();
    Tape::active()->record([xi, gi, bi, oi, xhat, rstd, rows, D, gx, gg, gb]() {
      if (oi->grad.empty()) return;
      if (gx) xi->ensure_grad();
      if (gg) gi->ensure_grad();
      if (gb) bi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* dy = oi->grad.data() + r * D;
        const double* h = xhat->data() + r * D;
        if (gg || gb) {
          for (std::size_t j = 0; j < D; ++j) {
            if (gg) gi->grad[j] += dy[j] * h[j];
            if (gb) bi->grad[j] += dy[j];
          }
        }
        if (gx) {
          double mean_dxhat = 0.0, mean_dxhat_h = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            const double dxh = dy[j] * gi->data[j];
            mean_dxhat += dxh;
            mean_dxhat_h += dxh * h[j];
          }
          mean_dxhat /= static_cast<double>(D);
          mean_dxhat_h /= static_cast<double>(D);
          double* dx = xi->grad.data() + r * D;
          const double r_inv = (*rstd)[r];
          for (std::size_t j = 0; j < D; ++j) {
            const double dxh = dy[j] * gi->data[j];
            dx[j] += r_inv * (dxh - mean_dxhat - h[j] * mean_dxhat_h);
          }
        }
      }
    });
  }
  return out;
}

namespace {

Tensor reduce_all(const Tensor& x, bool take_mean) {
  const std::size_t n = x.numel();
  double acc = 0.0;
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) acc += px[i];
  if (take_mean) acc /= static_cast<double>(n);
  Tensor out = Tensor::scalar(acc);
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    const double w = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
    Tape::active()->record([xi, oi, w]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double g = oi->grad[0] * w;
      for (double& v : xi->grad) v += g;
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, false); }

Tensor mean(const Tensor& x) { return reduce_all(x, true); }

}  // namespace pastn
