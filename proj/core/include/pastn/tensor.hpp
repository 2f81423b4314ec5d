#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pastn/errors.hpp"

namespace pastn {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);
std::vector<std::size_t> row_major_strides(const Shape& s);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major tensor of doubles with an optional gradient slot. Values
// are immutable after forward construction except for the gradient slot;
// copies share storage (handle semantics).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t numel() const { return impl_->numel(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;

  // Element access for tests and host-side assembly (row-major indices).
  double at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  // Mutable access allocates a zeroed buffer on first use.
  std::span<double> grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy of values (fresh storage, no grad).
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl);
};

Tensor wrap_impl(std::shared_ptr<detail::TensorImpl> impl);

// Records the forward computation in execution order; replaying the entries
// in reverse visits every node exactly once, which is why no explicit
// topological sort is needed. One tape is owned by one logical thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  static bool recording();

  void record(std::function<void()> backward_step);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad leaf reachable from it. Callable once per tape.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
  bool used_ = false;
};

// ---- elementwise / binary (numpy-style trailing broadcast) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);

// Inverted dropout: zeroes each element with probability p and scales
// survivors by 1/(1-p) when training; exact identity in eval mode.
Tensor dropout(const Tensor& x, double p, bool training, Rng* rng);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& x);  // 2-D
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::size_t parts);

// ---- contractions ----
Tensor matmul(const Tensor& a, const Tensor& b);                        // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false); // [g,m,k]x[g,k,n]
// 1x1 convolution over the channel axis of a [B,C,N,T] tensor.
Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());
// Dilated causal convolution along the last axis of [B,C,N,T]; no padding,
// output T' = T - dilation*(k-1).
Tensor temporal_conv(const Tensor& x, const Tensor& w, std::size_t dilation);
// The 2-D primitive: x [C_in,T], f [C_out,C_in,k].
Tensor dilated_causal_conv(const Tensor& x, const Tensor& f, std::size_t dilation);
// out[b,c,n,t] = sum_m p[n,m] * x[b,c,m,t]; differentiable in both inputs.
Tensor graph_propagate(const Tensor& x, const Tensor& p);

// ---- normalization / reductions ----
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes the last axis to mean 0 / variance 1, then applies gamma, beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace pastn
