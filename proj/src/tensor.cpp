#include "smc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace smc {

namespace {

thread_local Tape* g_tape = nullptr;
thread_local OpMeter* g_meter = nullptr;

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

void check_shape(const Shape& s) {
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
  }
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

void count_elementwise(std::int64_t n) {
  if (g_meter) g_meter->elementwise += static_cast<std::uint64_t>(n);
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               std::initializer_list<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
  std::span<const Tensor> span(inputs.begin(), inputs.size());
  return detail::build_op(op, std::move(shape), std::move(value), span,
                          std::move(backward_fn));
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ShapeError(std::string(op) + " expects a 2-d tensor, got shape " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

// Treat 1-d tensors as a single row for the softmax family.
std::pair<std::int64_t, std::int64_t> as_rows_cols(const Tensor& t, const char* op) {
  const Shape& s = t.shape();
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError(std::string(op) + " expects a 1-d or 2-d tensor, got shape " +
                   shape_str(s));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

void Node::accumulate(std::span<const double> g) {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void Node::accumulate_at(std::int64_t i, double g) {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  grad[static_cast<std::size_t>(i)] += g;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  check_finite(data, "from_data");
  return Tensor(make_leaf(std::move(shape), std::move(data), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  check_finite(data, "parameter");
  return Tensor(make_leaf(std::move(shape), std::move(data), true));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::full(Shape shape, double v) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, v), false));
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

double Tensor::item() const {
  if (node_ == nullptr) throw UsageError("item() on an undefined tensor");
  if (numel() != 1) {
    throw UsageError("item() requires a single-element tensor, got shape " +
                     shape_str(shape()));
  }
  return node_->value[0];
}

void Tape::backward(const Tensor& loss) {
  Node* ln = loss.node();
  if (ln == nullptr) throw UsageError("backward on an undefined tensor");
  if (ln->numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(ln->shape));
  }
  if (ln->owner != this) {
    throw UsageError("backward on a tensor detached from this tape");
  }
  ln->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
}

void Tape::clear() {
  // Break parent links front-to-back; this bounds destructor recursion on
  // long op chains.
  for (auto& n : nodes_) {
    n->backward = nullptr;
    n->parents.clear();
  }
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = previous_; }

Tape* active_tape() { return g_tape; }

void set_op_meter(OpMeter* meter) { g_meter = meter; }
OpMeter* op_meter() { return g_meter; }

void backward(const Tensor& loss) {
  Node* ln = loss.node();
  if (ln == nullptr) throw UsageError("backward on an undefined tensor");
  if (ln->owner == nullptr) {
    throw UsageError("backward on a detached tensor (no recorded operations)");
  }
  ln->owner->backward(loss);
}

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  count_elementwise(n);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op("add", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
  count_elementwise(n);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op("sub", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  count_elementwise(n);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto av = a.values();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * c;
  count_elementwise(n);
  auto an = a.node_ptr();
  return make_op("scale", a.shape(), std::move(out), {a}, [an, c](Node& self) {
    if (!an->requires_grad) return;
    if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_bias");
  if (bias.shape().size() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: bias shape " + shape_str(bias.shape()) +
                     " does not match row width of " + shape_str(x.shape()));
  }
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  auto xv = x.values(), bv = bias.values();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] + bv[j];
  count_elementwise(rows * cols);
  auto xn = x.node_ptr();
  auto bn = bias.node_ptr();
  return make_op("add_bias", x.shape(), std::move(out), {x, bias},
                 [xn, bn, rows, cols](Node& self) {
                   if (xn->requires_grad) xn->accumulate(self.grad);
                   if (bn->requires_grad) {
                     if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
                     for (std::int64_t i = 0; i < rows; ++i)
                       for (std::int64_t j = 0; j < cols; ++j)
                         bn->grad[j] += self.grad[i * cols + j];
                   }
                 });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_2d(x, "scale_rows");
  if (s.shape().size() != 1 || s.dim(0) != x.dim(0)) {
    throw ShapeError("scale_rows: scale shape " + shape_str(s.shape()) +
                     " does not match row count of " + shape_str(x.shape()));
  }
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  auto xv = x.values(), sv = s.values();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] * sv[i];
  count_elementwise(rows * cols);
  auto xn = x.node_ptr();
  auto sn = s.node_ptr();
  return make_op("scale_rows", x.shape(), std::move(out), {x, s},
                 [xn, sn, rows, cols](Node& self) {
                   if (xn->requires_grad) {
                     if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                     for (std::int64_t i = 0; i < rows; ++i)
                       for (std::int64_t j = 0; j < cols; ++j)
                         xn->grad[i * cols + j] += self.grad[i * cols + j] * sn->value[i];
                   }
                   if (sn->requires_grad) {
                     if (sn->grad.empty()) sn->grad.assign(sn->value.size(), 0.0);
                     for (std::int64_t i = 0; i < rows; ++i) {
                       double acc = 0.0;
                       for (std::int64_t j = 0; j < cols; ++j)
                         acc += self.grad[i * cols + j] * xn->value[i * cols + j];
                       sn->grad[i] += acc;
                     }
                   }
                 });
}

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  if (g_meter) g_meter->mul_adds += static_cast<std::uint64_t>(m * k * n);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    // dA = dC * B^T, dB = A^T * dC
    if (an->requires_grad) {
      if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          const double g = self.grad[i * n + j];
          if (g == 0.0) continue;
          for (std::int64_t p = 0; p < k; ++p) an->grad[i * k + p] += g * bn->value[p * n + j];
        }
    }
    if (bn->requires_grad) {
      if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          const double av_ = an->value[i * k + p];
          if (av_ == 0.0) continue;
          for (std::int64_t j = 0; j < n; ++j) bn->grad[p * n + j] += av_ * self.grad[i * n + j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  auto av = a.values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto an = a.node_ptr();
  return make_op("transpose", {n, m}, std::move(out), {a}, [an, m, n](Node& self) {
    if (!an->requires_grad) return;
    if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
  });
}

// ---- nonlinearities ------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
  const auto n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto xv = x.values();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  count_elementwise(n);
  auto xn = x.node_ptr();
  return make_op("sigmoid", x.shape(), std::move(out), {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      xn->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor swish(const Tensor& x) { return mul(x, sigmoid(x)); }

// ---- reductions ----------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  count_elementwise(x.numel());
  auto xn = x.node_ptr();
  return make_op("sum_all", {1}, {acc}, {x}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
    const double g = self.grad[0];
    for (auto& gi : xn->grad) gi += g;
  });
}

Tensor col_sums(const Tensor& x) {
  require_2d(x, "col_sums");
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
  auto xv = x.values();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out[j] += xv[i * cols + j];
  count_elementwise(rows * cols);
  auto xn = x.node_ptr();
  return make_op("col_sums", {cols}, std::move(out), {x}, [xn, rows, cols](Node& self) {
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j) xn->grad[i * cols + j] += self.grad[j];
  });
}

Tensor row_norms(const Tensor& x) {
  require_2d(x, "row_norms");
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows));
  auto xv = x.values();
  for (std::int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      const double v = xv[i * cols + j];
      acc += v * v;
    }
    out[i] = std::sqrt(acc);
  }
  count_elementwise(rows * cols);
  auto xn = x.node_ptr();
  return make_op("row_norms", {rows}, std::move(out), {x}, [xn, rows, cols](Node& self) {
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
    for (std::int64_t i = 0; i < rows; ++i) {
      const double norm = self.value[i];
      if (norm == 0.0) continue;  // subgradient 0 at the origin
      const double g = self.grad[i] / norm;
      for (std::int64_t j = 0; j < cols; ++j)
        xn->grad[i * cols + j] += g * xn->value[i * cols + j];
    }
  });
}

// ---- slicing / indexing ---------------------------------------------------

Tensor row_slice(const Tensor& x, std::int64_t r0, std::int64_t r1) {
  require_2d(x, "row_slice");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (r0 < 0 || r1 < r0 || r1 > rows) {
    throw ShapeError("row_slice: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                     ") invalid for shape " + shape_str(x.shape()));
  }
  const auto out_rows = r1 - r0;
  std::vector<double> out(x.values().begin() + r0 * cols, x.values().begin() + r1 * cols);
  auto xn = x.node_ptr();
  return make_op("row_slice", {out_rows, cols}, std::move(out), {x},
                 [xn, r0, cols](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     xn->grad[static_cast<std::size_t>(r0 * cols) + i] += self.grad[i];
                 });
}

Tensor col_slice(const Tensor& x, std::int64_t c0, std::int64_t c1) {
  require_2d(x, "col_slice");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (c0 < 0 || c1 < c0 || c1 > cols) {
    throw ShapeError("col_slice: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") invalid for shape " + shape_str(x.shape()));
  }
  const auto w = c1 - c0;
  std::vector<double> out(static_cast<std::size_t>(rows * w));
  auto xv = x.values();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < w; ++j) out[i * w + j] = xv[i * cols + c0 + j];
  auto xn = x.node_ptr();
  return make_op("col_slice", {rows, w}, std::move(out), {x},
                 [xn, rows, cols, c0, w](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::int64_t i = 0; i < rows; ++i)
                     for (std::int64_t j = 0; j < w; ++j)
                       xn->grad[i * cols + c0 + j] += self.grad[i * w + j];
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no parts");
  const auto cols = parts[0].shape().size() == 2 ? parts[0].dim(1) : -1;
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.dim(1) != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

  // make_op takes an initializer_list; build the node by hand for N inputs.
  check_finite(out, "concat_rows");
  auto n = std::make_shared<Node>();
  n->shape = {rows, cols};
  n->value = std::move(out);
  n->op = "concat_rows";
  bool needs_grad = false;
  for (const auto& p : parts)
    if (p.node()->requires_grad) needs_grad = true;
  if (needs_grad && active_tape() != nullptr) {
    n->requires_grad = true;
    n->owner = active_tape();
    std::vector<std::shared_ptr<Node>> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    n->parents = parents;
    n->backward = [parents](Node& self) {
      std::size_t off = 0;
      for (const auto& pn : parents) {
        const std::size_t len = pn->value.size();
        if (pn->requires_grad) {
          if (pn->grad.empty()) pn->grad.assign(len, 0.0);
          for (std::size_t i = 0; i < len; ++i) pn->grad[i] += self.grad[off + i];
        }
        off += len;
      }
    };
    active_tape()->record(n);
  }
  return Tensor(std::move(n));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no parts");
  const auto rows = parts[0].shape().size() == 2 ? parts[0].dim(0) : -1;
  std::int64_t cols = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    cols += p.dim(1);
  }
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  std::int64_t base = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    auto pv = p.values();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < w; ++j) out[i * cols + base + j] = pv[i * w + j];
    base += w;
  }
  check_finite(out, "concat_cols");
  auto n = std::make_shared<Node>();
  n->shape = {rows, cols};
  n->value = std::move(out);
  n->op = "concat_cols";
  bool needs_grad = false;
  for (const auto& p : parts)
    if (p.node()->requires_grad) needs_grad = true;
  if (needs_grad && active_tape() != nullptr) {
    n->requires_grad = true;
    n->owner = active_tape();
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& p : parts) parents.push_back(p.node_ptr());
    n->parents = parents;
    n->backward = [parents, rows, cols](Node& self) {
      std::int64_t base = 0;
      for (const auto& pn : parents) {
        const std::int64_t w = pn->shape[1];
        if (pn->requires_grad) {
          if (pn->grad.empty()) pn->grad.assign(pn->value.size(), 0.0);
          for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < w; ++j)
              pn->grad[i * w + j] += self.grad[i * cols + base + j];
        }
        base += w;
      }
    };
    active_tape()->record(n);
  }
  return Tensor(std::move(n));
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices) {
  require_2d(x, "gather_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  for (auto i : indices) {
    if (i < 0 || i >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       shape_str(x.shape()));
    }
  }
  const auto k = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(k * cols));
  auto xv = x.values();
  for (std::int64_t i = 0; i < k; ++i)
    std::copy_n(&xv[indices[i] * cols], cols, &out[i * cols]);
  auto xn = x.node_ptr();
  return make_op("gather_rows", {k, cols}, std::move(out), {x},
                 [xn, indices, cols](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::size_t i = 0; i < indices.size(); ++i)
                     for (std::int64_t j = 0; j < cols; ++j)
                       xn->grad[indices[i] * cols + j] += self.grad[i * cols + j];
                 });
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices,
                    std::int64_t n_rows) {
  require_2d(x, "scatter_rows");
  const auto k = x.dim(0), cols = x.dim(1);
  if (static_cast<std::int64_t>(indices.size()) != k) {
    throw ShapeError("scatter_rows: index count does not match row count");
  }
  for (auto i : indices) {
    if (i < 0 || i >= n_rows) {
      throw ShapeError("scatter_rows: index " + std::to_string(i) + " out of range");
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n_rows * cols), 0.0);
  auto xv = x.values();
  for (std::int64_t i = 0; i < k; ++i)
    std::copy_n(&xv[i * cols], cols, &out[indices[i] * cols]);
  auto xn = x.node_ptr();
  return make_op("scatter_rows", {n_rows, cols}, std::move(out), {x},
                 [xn, indices, cols](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::size_t i = 0; i < indices.size(); ++i)
                     for (std::int64_t j = 0; j < cols; ++j)
                       xn->grad[i * cols + j] += self.grad[indices[i] * cols + j];
                 });
}

Tensor gather_cols_per_row(const Tensor& x, const std::vector<std::int64_t>& idx,
                           std::int64_t out_cols) {
  require_2d(x, "gather_cols_per_row");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (static_cast<std::int64_t>(idx.size()) != rows * out_cols) {
    throw ShapeError("gather_cols_per_row: index table size mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(rows * out_cols));
  auto xv = x.values();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < out_cols; ++j) {
      const auto c = idx[i * out_cols + j];
      if (c < 0 || c >= cols) {
        throw ShapeError("gather_cols_per_row: column index out of range");
      }
      out[i * out_cols + j] = xv[i * cols + c];
    }
  auto xn = x.node_ptr();
  return make_op("gather_cols_per_row", {rows, out_cols}, std::move(out), {x},
                 [xn, idx, rows, cols, out_cols](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::int64_t i = 0; i < rows; ++i)
                     for (std::int64_t j = 0; j < out_cols; ++j)
                       xn->grad[i * cols + idx[i * out_cols + j]] +=
                           self.grad[i * out_cols + j];
                 });
}

Tensor pick(const Tensor& x, const std::vector<std::int64_t>& flat_idx) {
  const auto n = x.numel();
  for (auto i : flat_idx) {
    if (i < 0 || i >= n) throw ShapeError("pick: flat index out of range");
  }
  const auto k = static_cast<std::int64_t>(flat_idx.size());
  std::vector<double> out(static_cast<std::size_t>(k));
  auto xv = x.values();
  for (std::int64_t i = 0; i < k; ++i) out[i] = xv[flat_idx[i]];
  auto xn = x.node_ptr();
  return make_op("pick", {k}, std::move(out), {x}, [xn, flat_idx](Node& self) {
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
    for (std::size_t i = 0; i < flat_idx.size(); ++i)
      xn->grad[flat_idx[i]] += self.grad[i];
  });
}

Tensor zero_masked_rows(const Tensor& x, const Mask& mask) {
  require_2d(x, "zero_masked_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (static_cast<std::int64_t>(mask.size()) != rows) {
    throw ShapeError("zero_masked_rows: mask length does not match row count");
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::int64_t i = 0; i < rows; ++i) {
    if (!mask[i]) std::fill_n(&out[i * cols], cols, 0.0);
  }
  auto xn = x.node_ptr();
  return make_op("zero_masked_rows", x.shape(), std::move(out), {x},
                 [xn, mask, cols](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::size_t i = 0; i < mask.size(); ++i) {
                     if (!mask[i]) continue;
                     for (std::int64_t j = 0; j < cols; ++j)
                       xn->grad[i * cols + j] += self.grad[i * cols + j];
                   }
                 });
}

// ---- softmax family -------------------------------------------------------

Tensor masked_softmax(const Tensor& x, const Mask& mask) {
  auto [rows, cols] = as_rows_cols(x, "masked_softmax");
  const bool shared_mask = static_cast<std::int64_t>(mask.size()) == cols;
  if (!shared_mask && static_cast<std::int64_t>(mask.size()) != rows * cols) {
    throw ShapeError("masked_softmax: mask must cover one row or the full tensor");
  }
  auto valid = [&](std::int64_t i, std::int64_t j) {
    return shared_mask ? mask[j] != 0 : mask[i * cols + j] != 0;
  };
  std::vector<double> out(static_cast<std::size_t>(rows * cols), 0.0);
  auto xv = x.values();
  for (std::int64_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < cols; ++j)
      if (valid(i, j)) mx = std::max(mx, xv[i * cols + j]);
    if (!std::isfinite(mx)) {
      throw UsageError("masked_softmax: row " + std::to_string(i) + " has no valid entry");
    }
    double denom = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      if (!valid(i, j)) continue;
      const double e = std::exp(xv[i * cols + j] - mx);
      out[i * cols + j] = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < cols; ++j)
      if (valid(i, j)) out[i * cols + j] /= denom;
  }
  count_elementwise(rows * cols);
  auto xn = x.node_ptr();
  auto bw = [xn, mask, rows, cols, shared_mask](Node& self) {
    if (!xn->requires_grad) return;
    if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
    auto valid = [&](std::int64_t i, std::int64_t j) {
      return shared_mask ? mask[j] != 0 : mask[i * cols + j] != 0;
    };
    for (std::int64_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < cols; ++j)
        if (valid(i, j)) dot += self.grad[i * cols + j] * self.value[i * cols + j];
      for (std::int64_t j = 0; j < cols; ++j) {
        if (!valid(i, j)) continue;
        xn->grad[i * cols + j] +=
            self.value[i * cols + j] * (self.grad[i * cols + j] - dot);
      }
    }
  };
  return make_op("masked_softmax", x.shape(), std::move(out), {x}, std::move(bw));
}

Tensor softmax(const Tensor& x) {
  auto [rows, cols] = as_rows_cols(x, "softmax");
  (void)rows;
  return masked_softmax(x, Mask(static_cast<std::size_t>(cols), 1));
}

Tensor softmax(const Tensor& x, int axis) {
  const auto rank = static_cast<int>(x.shape().size());
  if (axis < 0 || axis >= rank) {
    throw UsageError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(x.shape()));
  }
  if (axis == rank - 1) return softmax(x);
  return transpose(softmax(transpose(x)));
}

Tensor log_softmax(const Tensor& x) {
  auto [rows, cols] = as_rows_cols(x, "log_softmax");
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  auto xv = x.values();
  for (std::int64_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < cols; ++j) mx = std::max(mx, xv[i * cols + j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) denom += std::exp(xv[i * cols + j] - mx);
    const double lse = mx + std::log(denom);
    for (std::int64_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] - lse;
  }
  count_elementwise(rows * cols);
  auto xn = x.node_ptr();
  return make_op("log_softmax", x.shape(), std::move(out), {x},
                 [xn, rows, cols](Node& self) {
                   if (!xn->requires_grad) return;
                   if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                   for (std::int64_t i = 0; i < rows; ++i) {
                     double gsum = 0.0;
                     for (std::int64_t j = 0; j < cols; ++j) gsum += self.grad[i * cols + j];
                     for (std::int64_t j = 0; j < cols; ++j) {
                       xn->grad[i * cols + j] +=
                           self.grad[i * cols + j] - std::exp(self.value[i * cols + j]) * gsum;
                     }
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  auto xn = x.node_ptr();
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {x}, [xn](Node& self) {
    if (xn->requires_grad) xn->accumulate(self.grad);
  });
}

Tensor gaussian(Rng& rng, Shape shape, double std_dev) {
  if (std_dev < 0.0) throw UsageError("gaussian: negative standard deviation");
  check_shape(shape);
  const auto n = shape_numel(shape);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  if (std_dev > 0.0) {
    for (auto& v : out) v = std_dev * rng.next_gaussian();
  }
  return Tensor::from_data(std::move(shape), std::move(out));
}

namespace detail {

Tensor build_op(const char* op, Shape shape, std::vector<double> value,
                std::span<const Tensor> inputs, std::function<void(Node&)> backward_fn) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs_grad = false;
  for (const Tensor& t : inputs) {
    if (t.node()->requires_grad) needs_grad = true;
  }
  if (needs_grad && g_tape != nullptr) {
    n->requires_grad = true;
    n->owner = g_tape;
    n->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward = std::move(backward_fn);
    g_tape->record(n);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace smc
