#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "smc/nn.hpp"
#include "smc/tensor.hpp"

namespace smc {

struct RouterParams {
  Tensor w, b;  // d x E, E
  double noise_std = 0.0;
};

struct ExpertBank {
  std::vector<FfnParams> experts;
  int size() const { return static_cast<int>(experts.size()); }
};

/// Per-expert routing statistics over the valid tokens of a batch. `gate_sum`
/// stays on the tape so the balance loss can differentiate through the mean
/// gate values; the activation counts are plain integers (argmax is not
/// differentiable).
struct RouterStats {
  std::vector<std::int64_t> counts;  // tokens routed to each expert
  Tensor gate_sum;                   // [E], sum of gate values over valid tokens
  std::int64_t valid_tokens = 0;

  int experts() const { return static_cast<int>(counts.size()); }
  /// Activation frequencies f_i (requires valid_tokens >= 1).
  std::vector<double> frequencies() const;
  /// Mean gate values as plain numbers (diagnostic view of gate_sum).
  std::vector<double> mean_gates() const;
  /// Pool token counts and gate sums of two batches/reuses of one module.
  static RouterStats pooled(const RouterStats& a, const RouterStats& b);
};

struct RoutingDecision {
  Tensor gates;                       // [T, E]
  std::vector<std::int64_t> chosen;   // argmax per token, ties to lowest index
};

/// Router projection and top-1 selection. Train mode adds N(0, noise_std^2)
/// to the logits before the softmax; eval mode never consumes the rng.
/// `pinned` overrides the argmax (gates are still computed) so gradient
/// checks can hold routing fixed.
RoutingDecision route(const Tensor& z, const RouterParams& r, Mode mode, Rng& rng,
                      const std::vector<std::int64_t>* pinned = nullptr);

struct MoeOutput {
  Tensor out;
  RouterStats stats;
  RoutingDecision decision;
};

/// Top-1 mixture-of-experts FFN: out_t = g_{t,i*} * FFN_{i*}(z_t). Only each
/// token's selected expert is evaluated. Statistics cover valid tokens only.
MoeOutput moe_ffn_forward(const Tensor& z, const ExpertBank& bank, const RouterParams& r,
                          Mode mode, Rng& rng, const Mask& mask,
                          const std::vector<std::int64_t>* pinned = nullptr);

/// E * sum_i f_i * gbar_i with f treated as a constant; the gradient flows
/// through the mean gate values only.
Tensor load_balance_loss(const RouterStats& stats);

/// Frequencies and gate sums over the valid tokens of a routed batch.
RouterStats collect_router_stats(const Tensor& gates,
                                 const std::vector<std::int64_t>& chosen,
                                 const Mask& mask);

}  // namespace smc
