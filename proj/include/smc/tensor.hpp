#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smc/rng.hpp"

namespace smc {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;
/// Row/position validity flags (1 = valid, 0 = padding). Not differentiated.
using Mask = std::vector<std::uint8_t>;

class Tape;
struct Node;

/// One recorded value in the computation graph. Values are dense row-major
/// doubles; the gradient buffer stays empty until backward first touches it.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  Tape* owner = nullptr;  // null for leaves (parameters, constants)
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void accumulate(std::span<const double> g);
  void accumulate_at(std::int64_t i, double g);
};

/// Value-semantic handle to a Node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf constructors. `parameter` marks the tensor as trainable.
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor parameter(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  double item() const;

  void zero_grad() { node_->grad.clear(); }
  /// Copy of this tensor's values detached from the graph.
  Tensor detach() const { return from_data(node_->shape, node_->value); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of executed operations. Creation order is a topological
/// order of the graph, so backward is a single reverse sweep. A tape is
/// confined to one thread; ops record onto the innermost active TapeScope.
class Tape {
 public:
  Tape() = default;
  ~Tape() { clear(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  /// Run the chain rule from `loss` (a scalar on this tape) back to leaves.
  /// Each node's rule fires exactly once; fan-out accumulates by summation.
  void backward(const Tensor& loss);

  /// Drop all recorded nodes without recursing through parent chains.
  void clear();

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

/// RAII activation of a tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Scalar work counters for the conditional-computation checks. Counting is
/// off unless a meter is explicitly enabled; `mul_adds` tallies fused
/// multiply-accumulates in matmul-like ops, `elementwise` tallies pointwise
/// scalar ops, `param_reads` is filled in by callers that know which
/// parameter tensors an op touched.
struct OpMeter {
  std::uint64_t mul_adds = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t param_reads = 0;
};

void set_op_meter(OpMeter* meter);
OpMeter* op_meter();

// ---- operations ---------------------------------------------------------
// All ops validate shapes, evaluate eagerly, raise NonFiniteError if the
// result contains NaN/Inf, and record a backward rule when a tape is active
// and some input requires gradients.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// x: [n, d], bias: [d]; adds bias to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x: [n, d], s: [n]; scales row i by s[i].
Tensor scale_rows(const Tensor& x, const Tensor& s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor sigmoid(const Tensor& x);
/// x * sigmoid(x), composed from primitives.
Tensor swish(const Tensor& x);

Tensor sum_all(const Tensor& x);
/// [n, d] -> [d], summing down each column.
Tensor col_sums(const Tensor& x);
/// [n, d] -> [n], L2 norm of each row. Gradient at a zero row is defined
/// as zero (subgradient choice).
Tensor row_norms(const Tensor& x);

Tensor row_slice(const Tensor& x, std::int64_t r0, std::int64_t r1);
Tensor col_slice(const Tensor& x, std::int64_t c0, std::int64_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
/// out[i] = x[indices[i], :]. Repeated indices accumulate gradient.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices);
/// Inverse placement: out has `n_rows` rows, out[indices[i]] = x[i],
/// remaining rows zero. Indices must be distinct.
Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices,
                    std::int64_t n_rows);
/// out[i, j] = x[i, idx[i * out_cols + j]]; idx entries index columns of x.
Tensor gather_cols_per_row(const Tensor& x, const std::vector<std::int64_t>& idx,
                           std::int64_t out_cols);
/// out[k] = x.flat[flat_idx[k]].
Tensor pick(const Tensor& x, const std::vector<std::int64_t>& flat_idx);
/// Zeroes rows whose mask entry is 0.
Tensor zero_masked_rows(const Tensor& x, const Mask& mask);

/// Row-wise softmax over valid columns; masked columns get probability 0.
/// A row with no valid column is a UsageError. Numerically stable via
/// max subtraction.
Tensor masked_softmax(const Tensor& x, const Mask& mask);
/// Softmax over the last axis of a 1-D or 2-D tensor (all columns valid).
Tensor softmax(const Tensor& x);
/// Softmax along the given axis of a 2-D tensor (0 = down columns,
/// 1 = along rows).
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x);

/// Same data, new shape (element count must match).
Tensor reshape(const Tensor& x, Shape shape);

/// i.i.d. N(0, std^2) leaf tensor; std = 0 gives exact zeros.
Tensor gaussian(Rng& rng, Shape shape, double std_dev);

void backward(const Tensor& loss);

namespace detail {
/// Construct an op node: finiteness check, gradient propagation flag, tape
/// recording. Layer code in other translation units builds custom ops
/// through this.
Tensor build_op(const char* op, Shape shape, std::vector<double> value,
                std::span<const Tensor> inputs, std::function<void(Node&)> backward_fn);
}  // namespace detail

// formatting helpers shared by error messages
std::string shape_str(const Shape& s);

}  // namespace smc
