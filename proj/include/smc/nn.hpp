#pragma once

#include <cstdint>
#include <vector>

#include "smc/tensor.hpp"

namespace smc {

enum class Mode { kTrain, kEval };

/// A batch of variable-length sequences packed along the row axis: `x` is
/// [sum(lens), d] and `lens` gives each sequence's row count in order.
/// Sequence-structured ops (attention, depthwise convolution) respect the
/// segment boundaries; pointwise ops ignore them.
struct PackedRows {
  Tensor x;
  std::vector<std::int64_t> lens;

  std::int64_t total_rows() const;
  std::int64_t offset(std::size_t seg) const;
};

struct FfnParams {
  Tensor w1, b1;  // d x d_ff, d_ff
  Tensor w2, b2;  // d_ff x d, d
};

struct MhsaParams {
  int heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // d x d projections
  Tensor wpos;                            // d x d, no bias
  Tensor u, v;                            // d (per-head content/position biases)
};

struct ConvModuleParams {
  // pointwise d -> 4d, GLU to 2d, depthwise over 2d channels, pointwise 2d -> d
  Tensor pw1_w, pw1_b;  // d x 4d
  Tensor dw_w, dw_b;    // 2d x k
  Tensor pw2_w, pw2_b;  // 2d x d
};

struct NormParams {
  Tensor gamma, beta;
  double eps = 1e-5;
};

struct BatchNormParams {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // state, not trainable
  double eps = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
};

struct FrontendParams {
  int channels = 32;
  Tensor conv1_w, conv1_b;  // ch x 1 x 3 x 3
  Tensor conv2_w, conv2_b;  // ch x ch x 3 x 3
  Tensor proj_w, proj_b;    // (ch * f_out) x d
};

/// w2 . swish(w1 . x + b1) + b2, applied per row.
Tensor ffn_forward(const Tensor& x, const FfnParams& p);

/// Split the last dimension in halves a, b and return a * sigmoid(b).
Tensor glu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const NormParams& p);

/// Masked batch normalization over all valid rows of the packed batch.
/// Train mode normalizes with batch statistics over valid rows and updates
/// the running estimates in place; eval mode uses the running estimates.
/// All rows (valid or not) are normalized with the chosen statistics.
Tensor batch_norm(const Tensor& x, BatchNormParams& p, Mode mode, const Mask& mask);

/// Multi-head self-attention with Transformer-XL relative position scoring,
/// applied independently to each packed segment. `mask` flags valid rows of
/// the packed batch; masked positions are excluded as attention keys.
Tensor rel_mhsa(const PackedRows& z, const MhsaParams& p, const Mask& mask);

/// Pointwise 4x expansion, GLU, depthwise convolution (same padding, zeros
/// beyond segment edges and at masked rows), batch norm, swish, pointwise
/// projection back to d.
Tensor conv_module(const PackedRows& z, const ConvModuleParams& p, BatchNormParams& bn,
                   Mode mode, const Mask& mask);

/// Two 3x3 stride-2 convolutions with swish, flattened per frame and
/// projected to d. Output length per axis is floor((n - 1) / 2) applied
/// twice (kernel 3, stride 2, no padding).
Tensor subsample_frontend(const Tensor& features, const FrontendParams& p);

std::int64_t subsampled_len(std::int64_t n);

/// Train mode zeroes each element with probability `rate` and scales the
/// survivors by 1/(1-rate); eval mode returns the input unchanged.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

/// Depthwise 1-d convolution over time within each segment (kernel k odd,
/// same padding, zeros beyond edges). Exposed for tests.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        const std::vector<std::int64_t>& lens);

/// Stride-2 valid 3x3 convolution on a {C, H, W} tensor. Exposed for tests.
Tensor conv2d_s2(const Tensor& x, const Tensor& w, const Tensor& b);

/// Sinusoidal embedding table: row m holds the encoding of position/offset
/// `positions[m]`.
Tensor sinusoid_embedding(const std::vector<std::int64_t>& positions, std::int64_t d);

}  // namespace smc
