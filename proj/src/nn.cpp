#include "smc/nn.hpp"

#include <cmath>
#include <numeric>

namespace smc {

namespace {

std::vector<Tensor> inputs3(const Tensor& a, const Tensor& b, const Tensor& c) {
  return {a, b, c};
}

}  // namespace

std::int64_t PackedRows::total_rows() const {
  return std::accumulate(lens.begin(), lens.end(), std::int64_t{0});
}

std::int64_t PackedRows::offset(std::size_t seg) const {
  std::int64_t off = 0;
  for (std::size_t i = 0; i < seg; ++i) off += lens[i];
  return off;
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  Tensor h = add_bias(matmul(x, p.w1), p.b1);
  h = swish(h);
  return add_bias(matmul(h, p.w2), p.b2);
}

Tensor glu(const Tensor& x) {
  if (x.shape().size() != 2 || x.dim(1) % 2 != 0) {
    throw ShapeError("glu: last dimension must be even, got " + shape_str(x.shape()));
  }
  const auto half = x.dim(1) / 2;
  Tensor a = col_slice(x, 0, half);
  Tensor b = col_slice(x, half, 2 * half);
  return mul(a, sigmoid(b));
}

Tensor layer_norm(const Tensor& x, const NormParams& p) {
  if (x.shape().size() != 2) {
    throw ShapeError("layer_norm expects [rows, d], got " + shape_str(x.shape()));
  }
  const auto rows = x.dim(0), d = x.dim(1);
  if (p.gamma.dim(0) != d || p.beta.dim(0) != d) {
    throw ShapeError("layer_norm: parameter width does not match input width");
  }
  const double eps = p.eps;
  auto xv = x.values();
  auto gv = p.gamma.values();
  auto bv = p.beta.values();
  std::vector<double> out(static_cast<std::size_t>(rows * d));
  for (std::int64_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += xv[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < d; ++j) {
      out[i * d + j] = gv[j] * (xv[i * d + j] - mean) * inv + bv[j];
    }
  }
  auto xn = x.node_ptr();
  auto gn = p.gamma.node_ptr();
  auto bn = p.beta.node_ptr();
  auto bw = [xn, gn, bn, rows, d, eps](Node& self) {
    for (std::int64_t i = 0; i < rows; ++i) {
      double mean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mean += xn->value[i * d + j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double c = xn->value[i * d + j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);

      double a_mean = 0.0, ax_mean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double xhat = (xn->value[i * d + j] - mean) * inv;
        const double a = self.grad[i * d + j] * gn->value[j];
        a_mean += a;
        ax_mean += a * xhat;
      }
      a_mean /= static_cast<double>(d);
      ax_mean /= static_cast<double>(d);

      for (std::int64_t j = 0; j < d; ++j) {
        const double xhat = (xn->value[i * d + j] - mean) * inv;
        const double g = self.grad[i * d + j];
        if (gn->requires_grad) gn->accumulate_at(j, g * xhat);
        if (bn->requires_grad) bn->accumulate_at(j, g);
        if (xn->requires_grad) {
          const double a = g * gn->value[j];
          xn->accumulate_at(i * d + j, inv * (a - a_mean - xhat * ax_mean));
        }
      }
    }
  };
  return detail::build_op("layer_norm", x.shape(), std::move(out),
                          inputs3(x, p.gamma, p.beta), std::move(bw));
}

namespace {

Tensor batch_norm_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const std::vector<double>& mean, const std::vector<double>& var,
                        const Mask& mask, bool batch_stats, double eps) {
  const auto rows = x.dim(0), d = x.dim(1);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> inv(static_cast<std::size_t>(d));
  for (std::int64_t j = 0; j < d; ++j) inv[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> out(static_cast<std::size_t>(rows * d));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      out[i * d + j] = gv[j] * (xv[i * d + j] - mean[j]) * inv[j] + bv[j];

  std::int64_t m = 0;
  for (auto v : mask) m += v ? 1 : 0;
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  auto bw = [xn, gn, bn, mean, inv, mask, rows, d, m, batch_stats](Node& self) {
    for (std::int64_t j = 0; j < d; ++j) {
      double dgamma = 0.0, dbeta = 0.0, s1 = 0.0, s2 = 0.0;
      for (std::int64_t i = 0; i < rows; ++i) {
        const double xhat = (xn->value[i * d + j] - mean[j]) * inv[j];
        const double g = self.grad[i * d + j];
        dgamma += g * xhat;
        dbeta += g;
        if (batch_stats) {
          // Every output row is normalized with the batch statistics, so
          // every row's gradient feeds the mean/variance paths.
          const double dxhat = g * gn->value[j];
          s1 += dxhat;
          s2 += dxhat * xhat;
        }
      }
      if (gn->requires_grad) gn->accumulate_at(j, dgamma);
      if (bn->requires_grad) bn->accumulate_at(j, dbeta);
      if (!xn->requires_grad) continue;
      for (std::int64_t i = 0; i < rows; ++i) {
        const double dxhat = self.grad[i * d + j] * gn->value[j];
        if (batch_stats && mask[i]) {
          const double xhat = (xn->value[i * d + j] - mean[j]) * inv[j];
          xn->accumulate_at(i * d + j,
                            inv[j] * (dxhat - s1 / static_cast<double>(m) -
                                      xhat * s2 / static_cast<double>(m)));
        } else {
          xn->accumulate_at(i * d + j, inv[j] * dxhat);
        }
      }
    }
  };
  return detail::build_op("batch_norm", x.shape(), std::move(out),
                          inputs3(x, gamma, beta), std::move(bw));
}

}  // namespace

Tensor batch_norm(const Tensor& x, BatchNormParams& p, Mode mode, const Mask& mask) {
  if (x.shape().size() != 2) {
    throw ShapeError("batch_norm expects [rows, d], got " + shape_str(x.shape()));
  }
  const auto rows = x.dim(0), d = x.dim(1);
  if (static_cast<std::int64_t>(mask.size()) != rows) {
    throw ShapeError("batch_norm: mask length does not match row count");
  }
  if (p.gamma.dim(0) != d) {
    throw ShapeError("batch_norm: parameter width does not match input width");
  }
  if (mode == Mode::kEval) {
    std::vector<double> mean(p.running_mean.values().begin(), p.running_mean.values().end());
    std::vector<double> var(p.running_var.values().begin(), p.running_var.values().end());
    return batch_norm_apply(x, p.gamma, p.beta, mean, var, mask, false, p.eps);
  }
  std::int64_t m = 0;
  for (auto v : mask) m += v ? 1 : 0;
  if (m == 0) throw UsageError("batch_norm: no valid rows in train mode");
  auto xv = x.values();
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  std::vector<double> var(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    for (std::int64_t j = 0; j < d; ++j) mean[j] += xv[i * d + j];
  }
  for (std::int64_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(m);
  for (std::int64_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mean[j];
      var[j] += c * c;
    }
  }
  for (std::int64_t j = 0; j < d; ++j) var[j] /= static_cast<double>(m);

  // Exponential moving average on the running estimates (population
  // variance, matching the normalization above).
  auto rm = p.running_mean.mutable_values();
  auto rv = p.running_var.mutable_values();
  for (std::int64_t j = 0; j < d; ++j) {
    rm[j] = p.momentum * rm[j] + (1.0 - p.momentum) * mean[j];
    rv[j] = p.momentum * rv[j] + (1.0 - p.momentum) * var[j];
  }
  return batch_norm_apply(x, p.gamma, p.beta, mean, var, mask, true, p.eps);
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        const std::vector<std::int64_t>& lens) {
  if (x.shape().size() != 2 || w.shape().size() != 2) {
    throw ShapeError("depthwise_conv1d expects 2-d input and kernel");
  }
  const auto rows = x.dim(0), ch = x.dim(1), k = w.dim(1);
  if (w.dim(0) != ch || b.dim(0) != ch) {
    throw ShapeError("depthwise_conv1d: channel mismatch");
  }
  if (k % 2 == 0) throw ShapeError("depthwise_conv1d: kernel size must be odd");
  if (std::accumulate(lens.begin(), lens.end(), std::int64_t{0}) != rows) {
    throw ShapeError("depthwise_conv1d: segment lengths do not cover the input");
  }
  const auto half = k / 2;
  auto xv = x.values();
  auto wv = w.values();
  auto bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(rows * ch));
  std::int64_t off = 0;
  for (auto len : lens) {
    for (std::int64_t t = 0; t < len; ++t) {
      for (std::int64_t c = 0; c < ch; ++c) {
        double acc = bv[c];
        for (std::int64_t dk = -half; dk <= half; ++dk) {
          const std::int64_t s = t + dk;
          if (s < 0 || s >= len) continue;  // zeros beyond segment edges
          acc += wv[c * k + dk + half] * xv[(off + s) * ch + c];
        }
        out[(off + t) * ch + c] = acc;
      }
    }
    off += len;
  }
  if (op_meter()) op_meter()->mul_adds += static_cast<std::uint64_t>(rows * ch * k);
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.node_ptr();
  auto bw = [xn, wn, bn, lens, ch, k, half](Node& self) {
    std::int64_t off = 0;
    for (auto len : lens) {
      for (std::int64_t t = 0; t < len; ++t) {
        for (std::int64_t c = 0; c < ch; ++c) {
          const double g = self.grad[(off + t) * ch + c];
          if (g == 0.0) continue;
          if (bn->requires_grad) bn->accumulate_at(c, g);
          for (std::int64_t dk = -half; dk <= half; ++dk) {
            const std::int64_t s = t + dk;
            if (s < 0 || s >= len) continue;
            if (wn->requires_grad)
              wn->accumulate_at(c * k + dk + half, g * xn->value[(off + s) * ch + c]);
            if (xn->requires_grad)
              xn->accumulate_at((off + s) * ch + c, g * wn->value[c * k + dk + half]);
          }
        }
      }
      off += len;
    }
  };
  return detail::build_op("depthwise_conv1d", x.shape(), std::move(out),
                          inputs3(x, w, b), std::move(bw));
}

Tensor conv_module(const PackedRows& z, const ConvModuleParams& p, BatchNormParams& bn,
                   Mode mode, const Mask& mask) {
  Tensor h = add_bias(matmul(z.x, p.pw1_w), p.pw1_b);
  Tensor g = glu(h);
  // Padded rows must contribute zeros to the convolution window.
  g = zero_masked_rows(g, mask);
  Tensor c = depthwise_conv1d(g, p.dw_w, p.dw_b, z.lens);
  Tensor n = batch_norm(c, bn, mode, mask);
  Tensor s = swish(n);
  return add_bias(matmul(s, p.pw2_w), p.pw2_b);
}

Tensor conv2d_s2(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().size() != 3 || w.shape().size() != 4) {
    throw ShapeError("conv2d_s2 expects {C,H,W} input and {Co,C,3,3} kernel");
  }
  const auto ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto co = w.dim(0);
  if (w.dim(1) != ci || w.dim(2) != 3 || w.dim(3) != 3 || b.dim(0) != co) {
    throw ShapeError("conv2d_s2: kernel shape mismatch");
  }
  if (h < 3 || wd < 3) {
    throw UsageError("conv2d_s2: input " + shape_str(x.shape()) +
                     " too short for a 3x3 stride-2 convolution");
  }
  const auto ho = (h - 3) / 2 + 1;
  const auto wo = (wd - 3) / 2 + 1;
  auto xv = x.values();
  auto wv = w.values();
  auto bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(co * ho * wo));
  for (std::int64_t o = 0; o < co; ++o) {
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j) {
        double acc = bv[o];
        for (std::int64_t c = 0; c < ci; ++c)
          for (std::int64_t p = 0; p < 3; ++p)
            for (std::int64_t q = 0; q < 3; ++q)
              acc += wv[((o * ci + c) * 3 + p) * 3 + q] *
                     xv[(c * h + 2 * i + p) * wd + 2 * j + q];
        out[(o * ho + i) * wo + j] = acc;
      }
    }
  }
  if (op_meter()) op_meter()->mul_adds += static_cast<std::uint64_t>(co * ho * wo * ci * 9);
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  auto bn = b.node_ptr();
  auto bw = [xn, wn, bn, ci, h, wd, co, ho, wo](Node& self) {
    for (std::int64_t o = 0; o < co; ++o) {
      for (std::int64_t i = 0; i < ho; ++i) {
        for (std::int64_t j = 0; j < wo; ++j) {
          const double g = self.grad[(o * ho + i) * wo + j];
          if (g == 0.0) continue;
          if (bn->requires_grad) bn->accumulate_at(o, g);
          for (std::int64_t c = 0; c < ci; ++c) {
            for (std::int64_t p = 0; p < 3; ++p) {
              for (std::int64_t q = 0; q < 3; ++q) {
                const auto widx = ((o * ci + c) * 3 + p) * 3 + q;
                const auto xidx = (c * h + 2 * i + p) * wd + 2 * j + q;
                if (wn->requires_grad) wn->accumulate_at(widx, g * xn->value[xidx]);
                if (xn->requires_grad) xn->accumulate_at(xidx, g * wn->value[widx]);
              }
            }
          }
        }
      }
    }
  };
  return detail::build_op("conv2d_s2", {co, ho, wo}, std::move(out), inputs3(x, w, b),
                          std::move(bw));
}

namespace {

/// {C, H, W} -> [H, C*W]: per output frame, channels-major flattening.
Tensor chw_to_rows(const Tensor& x) {
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c * h * w));
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        out[i * (c * w) + ci * w + j] = xv[(ci * h + i) * w + j];
  auto xn = x.node_ptr();
  std::vector<Tensor> ins = {x};
  return detail::build_op("chw_to_rows", {h, c * w}, std::move(out), ins,
                          [xn, c, h, w](Node& self) {
                            if (!xn->requires_grad) return;
                            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                            for (std::int64_t ci = 0; ci < c; ++ci)
                              for (std::int64_t i = 0; i < h; ++i)
                                for (std::int64_t j = 0; j < w; ++j)
                                  xn->grad[(ci * h + i) * w + j] +=
                                      self.grad[i * (c * w) + ci * w + j];
                          });
}

}  // namespace

std::int64_t subsampled_len(std::int64_t n) {
  const auto once = (n - 1) / 2;
  return (once - 1) / 2;
}

Tensor subsample_frontend(const Tensor& features, const FrontendParams& p) {
  if (features.shape().size() != 2) {
    throw ShapeError("subsample_frontend expects [T, F], got " +
                     shape_str(features.shape()));
  }
  const auto t = features.dim(0), f = features.dim(1);
  if (subsampled_len(t) < 1) {
    throw UsageError("subsample_frontend: input length " + std::to_string(t) +
                     " too short to survive two stride-2 convolutions (need >= 7)");
  }
  Tensor x = reshape(features, {1, t, f});
  x = swish(conv2d_s2(x, p.conv1_w, p.conv1_b));
  x = swish(conv2d_s2(x, p.conv2_w, p.conv2_b));
  Tensor rows = chw_to_rows(x);
  return add_bias(matmul(rows, p.proj_w), p.proj_b);
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw UsageError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::kEval || rate == 0.0) return x;
  const auto n = x.numel();
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> gain(static_cast<std::size_t>(n));
  for (auto& g : gain) g = rng.next_double() < rate ? 0.0 : keep_scale;
  auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out[i] = xv[i] * gain[i];
  auto xn = x.node_ptr();
  std::vector<Tensor> ins = {x};
  return detail::build_op("dropout", x.shape(), std::move(out), ins,
                          [xn, gain](Node& self) {
                            if (!xn->requires_grad) return;
                            if (xn->grad.empty()) xn->grad.assign(xn->value.size(), 0.0);
                            for (std::size_t i = 0; i < gain.size(); ++i)
                              xn->grad[i] += self.grad[i] * gain[i];
                          });
}

Tensor sinusoid_embedding(const std::vector<std::int64_t>& positions, std::int64_t d) {
  std::vector<double> out(positions.size() * static_cast<std::size_t>(d));
  for (std::size_t m = 0; m < positions.size(); ++m) {
    const double pos = static_cast<double>(positions[m]);
    for (std::int64_t i = 0; i < d; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      const double angle = pos / std::pow(10000.0, exponent);
      out[m * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from_data({static_cast<std::int64_t>(positions.size()), d}, std::move(out));
}

Tensor rel_mhsa(const PackedRows& z, const MhsaParams& p, const Mask& mask) {
  const auto d = z.x.dim(1);
  const int heads = p.heads;
  if (d % heads != 0) {
    throw ShapeError("rel_mhsa: model dim " + std::to_string(d) +
                     " not divisible by head count " + std::to_string(heads));
  }
  if (static_cast<std::int64_t>(mask.size()) != z.total_rows()) {
    throw ShapeError("rel_mhsa: mask length does not match packed rows");
  }
  const auto dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = add_bias(matmul(z.x, p.wq), p.bq);
  Tensor k = add_bias(matmul(z.x, p.wk), p.bk);
  Tensor v = add_bias(matmul(z.x, p.wv), p.bv);
  // Global content/position biases fold into the queries.
  Tensor qu = add_bias(q, p.u);
  Tensor qv = add_bias(q, p.v);

  std::vector<Tensor> seg_outs;
  std::int64_t off = 0;
  for (auto len : z.lens) {
    const auto t = len;
    // Relative offsets i - j run from t-1 down to -(t-1); row m of the
    // embedding table holds offset t-1-m.
    std::vector<std::int64_t> offsets(static_cast<std::size_t>(2 * t - 1));
    for (std::int64_t m = 0; m < 2 * t - 1; ++m) offsets[m] = t - 1 - m;
    Tensor pos = matmul(sinusoid_embedding(offsets, d), p.wpos);  // [2t-1, d]

    Mask key_mask(mask.begin() + off, mask.begin() + off + t);
    std::vector<std::int64_t> shift_idx(static_cast<std::size_t>(t * t));
    for (std::int64_t i = 0; i < t; ++i)
      for (std::int64_t j = 0; j < t; ++j) shift_idx[i * t + j] = t - 1 - i + j;

    Tensor qu_s = row_slice(qu, off, off + t);
    Tensor qv_s = row_slice(qv, off, off + t);
    Tensor k_s = row_slice(k, off, off + t);
    Tensor v_s = row_slice(v, off, off + t);

    std::vector<Tensor> head_ctx;
    for (int hh = 0; hh < heads; ++hh) {
      const auto c0 = hh * dh, c1 = (hh + 1) * dh;
      Tensor qh = col_slice(qu_s, c0, c1);
      Tensor qvh = col_slice(qv_s, c0, c1);
      Tensor kh = col_slice(k_s, c0, c1);
      Tensor vh = col_slice(v_s, c0, c1);
      Tensor ph = col_slice(pos, c0, c1);

      Tensor content = matmul(qh, transpose(kh));                 // [t, t]
      Tensor pos_full = matmul(qvh, transpose(ph));               // [t, 2t-1]
      Tensor pos_scores = gather_cols_per_row(pos_full, shift_idx, t);
      Tensor scores = scale(add(content, pos_scores), inv_sqrt_dh);
      Tensor att = masked_softmax(scores, key_mask);
      head_ctx.push_back(matmul(att, vh));
    }
    seg_outs.push_back(concat_cols(head_ctx));
    off += len;
  }
  Tensor ctx = seg_outs.size() == 1 ? seg_outs[0] : concat_rows(seg_outs);
  return add_bias(matmul(ctx, p.wo), p.bo);
}

}  // namespace smc
