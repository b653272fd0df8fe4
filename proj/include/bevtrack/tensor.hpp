#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bevtrack/common.hpp"

namespace bevtrack {

using Shape = std::vector<std::size_t>;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily; empty means "all zero"
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major double tensor with dynamic tape-based reverse-mode autodiff.
// Value-semantic handle: copies share the underlying node, which is what makes
// parameter aliasing (weight sharing) free.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const;  // first dim of a matrix
  std::size_t cols() const;  // second dim of a matrix

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double value() const;  // scalar extraction
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Tape recording is on by default; inference wraps forward passes in a guard.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse pass from a scalar loss. Zeroes the grad buffers of every node
// reachable from `loss` first, then accumulates d(loss)/d(node) into each.
void backward(const Tensor& loss);

// ---- differentiable ops -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor powc(const Tensor& a, double e);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor gather_rows(const Tensor& a, std::vector<std::size_t> idx);
Tensor gather_entries(const Tensor& a, std::vector<std::pair<std::size_t, std::size_t>> rc);
Tensor reshape(const Tensor& a, Shape shape);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// Pairwise Hadamard products: out[n*M+m, :] = a[n, :] * b[m, :].
Tensor pairwise_hadamard(const Tensor& a, const Tensor& b);

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

}  // namespace bevtrack
