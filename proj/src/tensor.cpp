#include "bevtrack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "bevtrack/kernels.hpp"

namespace bevtrack {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

void check_finite(const detail::TensorNode& n, const char* op) {
  for (double v : n.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": produced non-finite value");
    }
  }
}

using NodePtr = std::shared_ptr<detail::TensorNode>;

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

bool taped(std::initializer_list<const Tensor*> ins) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Attach tape linkage to `out` if any input wants gradients.
void record(Tensor& out, std::initializer_list<const Tensor*> ins,
            std::function<void(detail::TensorNode&)> backward_fn) {
  if (!taped(ins)) return;
  auto n = out.node();
  n->requires_grad = true;
  for (const Tensor* t : ins) n->parents.push_back(t->node());
  n->backward_fn = std::move(backward_fn);
}

void require(bool cond, const char* msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, v));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  require(shape_numel(shape) == data.size(), "from_data: data length != product of shape");
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

std::size_t Tensor::rows() const {
  require(rank() == 2, "rows: tensor is not a matrix");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require(rank() == 2, "cols: tensor is not a matrix");
  return node_->shape[1];
}

std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->value.size(), 0.0);
}

double Tensor::value() const {
  require(numel() == 1, "value: tensor is not a scalar");
  return node_->value[0];
}

void backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar");

  // Post-order DFS, then replay in reverse (children before parents).
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorNode* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::TensorNode* n : order) n->grad.assign(n->value.size(), 0.0);
  loss.node()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }

  for (detail::TensorNode* n : order) {
    for (double g : n->grad) {
      if (!std::isfinite(g)) throw NumericError("backward: non-finite gradient");
    }
  }
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be matrices");
  if (a.cols() != b.rows()) throw ContractError("matmul: inner dimensions disagree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  check_finite(*out.node(), "matmul");
  record(out, {&a, &b}, [m, k, n](detail::TensorNode& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      std::vector<double> da(m * k);
      kernels::matmul_nt(o.grad.data(), pb.value.data(), da.data(), m, n, k);
      for (std::size_t i = 0; i < da.size(); ++i) pa.grad[i] += da[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      std::vector<double> db(k * n);
      kernels::matmul_tn(pa.value.data(), o.grad.data(), db.data(), k, m, n);
      for (std::size_t i = 0; i < db.size(); ++i) pb.grad[i] += db[i];
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: operand must be a matrix");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  record(out, {&a}, [m, n](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += o.grad[j * m + i];
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  check_finite(*out.node(), "add");
  record(out, {&a, &b}, [](detail::TensorNode& o) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *o.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  check_finite(*out.node(), "sub");
  record(out, {&a, &b}, [](detail::TensorNode& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite(*out.node(), "mul");
  record(out, {&a, &b}, [](detail::TensorNode& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.value[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  check_finite(*out.node(), "scale");
  record(out, {&a}, [s](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * s;
  });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > 0 ? a.data()[i] : 0.0;
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (p.value[i] > 0) p.grad[i] += o.grad[i];
  });
  return out;
}

Tensor abs(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::abs(a.data()[i]);
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (p.value[i] > 0) p.grad[i] += o.grad[i];
      else if (p.value[i] < 0) p.grad[i] -= o.grad[i];
    }
  });
  return out;
}

Tensor sin(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::sin(a.data()[i]);
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      p.grad[i] += o.grad[i] * std::cos(p.value[i]);
  });
  return out;
}

Tensor cos(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::cos(a.data()[i]);
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      p.grad[i] -= o.grad[i] * std::sin(p.value[i]);
  });
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::exp(a.data()[i]);
  check_finite(*out.node(), "exp");
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * o.value[i];
  });
  return out;
}

Tensor log(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::log(a.data()[i]);
  check_finite(*out.node(), "log");
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] / p.value[i];
  });
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      p.grad[i] += o.grad[i] * o.value[i] * (1.0 - o.value[i]);
  });
  return out;
}

Tensor log_sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
  }
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double x = p.value[i];
      const double sm = x >= 0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
      p.grad[i] += o.grad[i] * sm;  // d/dx log sigmoid(x) = sigmoid(-x)
    }
  });
  return out;
}

Tensor powc(const Tensor& a, double e) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = std::pow(a.data()[i], e);
  check_finite(*out.node(), "powc");
  record(out, {&a}, [e](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double d = e * std::pow(p.value[i], e - 1.0);
      p.grad[i] += o.grad[i] * d;
    }
  });
  return out;
}

namespace {

// Decompose a 1D/2D tensor into slices along `axis`: `outer` independent
// slices of length `len` with stride `stride`, starting every `step`.
struct AxisView {
  std::size_t outer, len, stride, step;
};

AxisView axis_view(const Tensor& a, std::size_t axis) {
  require(a.rank() >= 1 && a.rank() <= 2, "softmax: rank must be 1 or 2");
  require(axis < a.rank(), "softmax: invalid axis");
  if (a.rank() == 1) return {1, a.dim(0), 1, 0};
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (axis == 1) return {r, c, 1, c};
  return {c, r, c, 1};
}

template <typename F>
void for_each_slice(const AxisView& v, F&& f) {
  for (std::size_t s = 0; s < v.outer; ++s) f(s * v.step, v.stride);
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a, axis);
  Tensor out = Tensor::zeros(a.shape());
  for_each_slice(v, [&](std::size_t base, std::size_t stride) {
    double mx = a.data()[base];
    for (std::size_t i = 1; i < v.len; ++i) mx = std::max(mx, a.data()[base + i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < v.len; ++i) {
      const double e = std::exp(a.data()[base + i * stride] - mx);
      out.data()[base + i * stride] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < v.len; ++i) out.data()[base + i * stride] /= sum;
  });
  check_finite(*out.node(), "softmax");
  record(out, {&a}, [v](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t s = 0; s < v.outer; ++s) {
      const std::size_t base = s * v.step;
      double dot = 0.0;
      for (std::size_t i = 0; i < v.len; ++i) {
        const std::size_t idx = base + i * v.stride;
        dot += o.grad[idx] * o.value[idx];
      }
      for (std::size_t i = 0; i < v.len; ++i) {
        const std::size_t idx = base + i * v.stride;
        p.grad[idx] += o.value[idx] * (o.grad[idx] - dot);
      }
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a, axis);
  Tensor out = Tensor::zeros(a.shape());
  for_each_slice(v, [&](std::size_t base, std::size_t stride) {
    double mx = a.data()[base];
    for (std::size_t i = 1; i < v.len; ++i) mx = std::max(mx, a.data()[base + i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < v.len; ++i) sum += std::exp(a.data()[base + i * stride] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < v.len; ++i)
      out.data()[base + i * stride] = a.data()[base + i * stride] - lse;
  });
  check_finite(*out.node(), "log_softmax");
  record(out, {&a}, [v](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t s = 0; s < v.outer; ++s) {
      const std::size_t base = s * v.step;
      double gsum = 0.0;
      for (std::size_t i = 0; i < v.len; ++i) gsum += o.grad[base + i * v.stride];
      for (std::size_t i = 0; i < v.len; ++i) {
        const std::size_t idx = base + i * v.stride;
        p.grad[idx] += o.grad[idx] - std::exp(o.value[idx]) * gsum;
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require(x.rank() == 2, "layer_norm: input must be a matrix");
  const std::size_t n = x.rows(), c = x.cols();
  require(gain.numel() == c && bias.numel() == c, "layer_norm: gain/bias size mismatch");
  constexpr double kEps = 1e-5;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (std::size_t j = 0; j < c; ++j)
      out.data()[i * c + j] = (xi[j] - mean) * inv * gain.data()[j] + bias.data()[j];
  }
  check_finite(*out.node(), "layer_norm");
  record(out, {&x, &gain, &bias}, [n, c](detail::TensorNode& o) {
    auto& px = *o.parents[0];
    auto& pg = *o.parents[1];
    auto& pb = *o.parents[2];
    constexpr double kEps2 = 1e-5;
    std::vector<double> xhat(c);
    for (std::size_t i = 0; i < n; ++i) {
      const double* xi = px.value.data() + i * c;
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += xi[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + kEps2);
      for (std::size_t j = 0; j < c; ++j) xhat[j] = (xi[j] - mean) * inv;

      if (pg.requires_grad) {
        pg.ensure_grad();
        for (std::size_t j = 0; j < c; ++j) pg.grad[j] += o.grad[i * c + j] * xhat[j];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t j = 0; j < c; ++j) pb.grad[j] += o.grad[i * c + j];
      }
      if (px.requires_grad) {
        px.ensure_grad();
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = o.grad[i * c + j] * pg.value[j];
          m1 += dxh;
          m2 += dxh * xhat[j];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = o.grad[i * c + j] * pg.value[j];
          px.grad[i * c + j] += inv * (dxh - m1 - xhat[j] * m2);
        }
      }
    }
  });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.cols() == c, "concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + r * c);
    r += p.rows();
  }
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad();
  if (grad_enabled() && any_grad) {
    auto n = out.node();
    n->requires_grad = true;
    for (const Tensor& p : parts) n->parents.push_back(p.node());
    n->backward_fn = [c](detail::TensorNode& o) {
      std::size_t r0 = 0;
      for (auto& pp : o.parents) {
        const std::size_t pr = pp->shape[0];
        if (pp->requires_grad) {
          pp->ensure_grad();
          for (std::size_t i = 0; i < pr * c; ++i) pp->grad[i] += o.grad[r0 * c + i];
        }
        r0 += pr;
      }
    };
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.rows() == r, "concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::zeros({r, total});
  std::size_t c0 = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy(p.data().begin() + i * pc, p.data().begin() + (i + 1) * pc,
                out.data().begin() + i * total + c0);
    c0 += pc;
  }
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad();
  if (grad_enabled() && any_grad) {
    auto n = out.node();
    n->requires_grad = true;
    for (const Tensor& p : parts) n->parents.push_back(p.node());
    n->backward_fn = [r, total](detail::TensorNode& o) {
      std::size_t off = 0;
      for (auto& pp : o.parents) {
        const std::size_t pc = pp->shape[1];
        if (pp->requires_grad) {
          pp->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              pp->grad[i * pc + j] += o.grad[i * total + off + j];
        }
        off += pc;
      }
    };
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  require(a.rank() == 2 && r0 <= r1 && r1 <= a.rows(), "slice_rows: invalid range");
  const std::size_t c = a.cols();
  Tensor out = Tensor::zeros({r1 - r0, c});
  std::copy(a.data().begin() + r0 * c, a.data().begin() + r1 * c, out.data().begin());
  record(out, {&a}, [r0, c](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[r0 * c + i] += o.grad[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  require(a.rank() == 2 && c0 <= c1 && c1 <= a.cols(), "slice_cols: invalid range");
  const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
  Tensor out = Tensor::zeros({r, w});
  for (std::size_t i = 0; i < r; ++i)
    std::copy(a.data().begin() + i * c + c0, a.data().begin() + i * c + c1,
              out.data().begin() + i * w);
  record(out, {&a}, [r, c, c0, w](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) p.grad[i * c + c0 + j] += o.grad[i * w + j];
  });
  return out;
}

Tensor gather_rows(const Tensor& a, std::vector<std::size_t> idx) {
  require(a.rank() == 2, "gather_rows: operand must be a matrix");
  const std::size_t c = a.cols();
  for (std::size_t i : idx) require(i < a.rows(), "gather_rows: index out of range");
  Tensor out = Tensor::zeros({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(a.data().begin() + idx[i] * c, a.data().begin() + (idx[i] + 1) * c,
              out.data().begin() + i * c);
  record(out, {&a}, [idx = std::move(idx), c](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[idx[i] * c + j] += o.grad[i * c + j];
  });
  return out;
}

Tensor gather_entries(const Tensor& a, std::vector<std::pair<std::size_t, std::size_t>> rc) {
  require(a.rank() == 2, "gather_entries: operand must be a matrix");
  const std::size_t c = a.cols();
  for (auto& [r, cc] : rc)
    require(r < a.rows() && cc < c, "gather_entries: index out of range");
  Tensor out = Tensor::zeros({rc.size()});
  for (std::size_t i = 0; i < rc.size(); ++i)
    out.data()[i] = a.data()[rc[i].first * c + rc[i].second];
  record(out, {&a}, [rc = std::move(rc), c](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < rc.size(); ++i)
      p.grad[rc[i].first * c + rc[i].second] += o.grad[i];
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
  Tensor out = Tensor::from_data(std::move(shape), a.data());
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
  return out;
}

Tensor reduce_sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(*out.node(), "reduce_sum");
  record(out, {&a}, [](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (double& g : p.grad) g += o.grad[0];
  });
  return out;
}

Tensor reduce_mean(const Tensor& a) {
  require(a.numel() > 0, "reduce_mean: empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(s * inv);
  check_finite(*out.node(), "reduce_mean");
  record(out, {&a}, [inv](detail::TensorNode& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (double& g : p.grad) g += o.grad[0] * inv;
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require(x.rank() == 2, "add_rowvec: input must be a matrix");
  const std::size_t r = x.rows(), c = x.cols();
  require(v.numel() == c, "add_rowvec: vector length mismatch");
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] + v.data()[j];
  check_finite(*out.node(), "add_rowvec");
  record(out, {&x, &v}, [r, c](detail::TensorNode& o) {
    auto& px = *o.parents[0];
    auto& pv = *o.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pv.grad[j] += o.grad[i * c + j];
    }
  });
  return out;
}

Tensor pairwise_hadamard(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.cols(),
          "pairwise_hadamard: channel mismatch");
  const std::size_t n = a.rows(), m = b.rows(), c = a.cols();
  Tensor out = Tensor::zeros({n * m, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.data()[(i * m + j) * c + ch] = a.data()[i * c + ch] * b.data()[j * c + ch];
  check_finite(*out.node(), "pairwise_hadamard");
  record(out, {&a, &b}, [n, m, c](detail::TensorNode& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double* g = o.grad.data() + (i * m + j) * c;
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) pa.grad[i * c + ch] += g[ch] * pb.value[j * c + ch];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) pb.grad[j * c + ch] += g[ch] * pa.value[i * c + ch];
        }
      }
    }
  });
  return out;
}

}  // namespace bevtrack
