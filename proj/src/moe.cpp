#include "smc/moe.hpp"

#include <string>

namespace smc {

std::vector<double> RouterStats::frequencies() const {
  if (valid_tokens < 1) throw UsageError("router stats cover no valid tokens");
  std::vector<double> f(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i)
    f[i] = static_cast<double>(counts[i]) / static_cast<double>(valid_tokens);
  return f;
}

std::vector<double> RouterStats::mean_gates() const {
  if (valid_tokens < 1) throw UsageError("router stats cover no valid tokens");
  std::vector<double> g(counts.size());
  auto gs = gate_sum.values();
  for (std::size_t i = 0; i < counts.size(); ++i)
    g[i] = gs[i] / static_cast<double>(valid_tokens);
  return g;
}

RouterStats RouterStats::pooled(const RouterStats& a, const RouterStats& b) {
  if (a.counts.size() != b.counts.size()) {
    throw UsageError("cannot pool router stats with different expert counts");
  }
  RouterStats out;
  out.counts.resize(a.counts.size());
  for (std::size_t i = 0; i < a.counts.size(); ++i) out.counts[i] = a.counts[i] + b.counts[i];
  out.gate_sum = add(a.gate_sum, b.gate_sum);
  out.valid_tokens = a.valid_tokens + b.valid_tokens;
  return out;
}

RoutingDecision route(const Tensor& z, const RouterParams& r, Mode mode, Rng& rng,
                      const std::vector<std::int64_t>* pinned) {
  Tensor logits = add_bias(matmul(z, r.w), r.b);  // [T, E]
  if (mode == Mode::kTrain && r.noise_std > 0.0) {
    logits = add(logits, gaussian(rng, logits.shape(), r.noise_std));
  }
  Tensor gates = softmax(logits);
  const auto t = gates.dim(0), e = gates.dim(1);
  RoutingDecision dec;
  dec.gates = gates;
  if (pinned != nullptr) {
    if (static_cast<std::int64_t>(pinned->size()) != t) {
      throw UsageError("pinned routing assignment length does not match token count");
    }
    dec.chosen = *pinned;
    return dec;
  }
  dec.chosen.resize(static_cast<std::size_t>(t));
  auto gv = gates.values();
  for (std::int64_t i = 0; i < t; ++i) {
    std::int64_t best = 0;
    double best_v = gv[i * e];
    for (std::int64_t j = 1; j < e; ++j) {
      if (gv[i * e + j] > best_v) {  // strict: ties break to the lowest index
        best_v = gv[i * e + j];
        best = j;
      }
    }
    dec.chosen[i] = best;
  }
  return dec;
}

RouterStats collect_router_stats(const Tensor& gates,
                                 const std::vector<std::int64_t>& chosen,
                                 const Mask& mask) {
  const auto t = gates.dim(0), e = gates.dim(1);
  if (static_cast<std::int64_t>(chosen.size()) != t ||
      static_cast<std::int64_t>(mask.size()) != t) {
    throw ShapeError("collect_router_stats: lengths do not match token count");
  }
  RouterStats stats;
  stats.counts.assign(static_cast<std::size_t>(e), 0);
  for (std::int64_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    ++stats.valid_tokens;
    ++stats.counts[chosen[i]];
  }
  if (stats.valid_tokens == 0) {
    throw UsageError("collect_router_stats: no valid tokens in batch");
  }
  stats.gate_sum = col_sums(zero_masked_rows(gates, mask));
  return stats;
}

Tensor load_balance_loss(const RouterStats& stats) {
  if (stats.valid_tokens < 1) {
    throw UsageError("load_balance_loss: stats cover no valid tokens");
  }
  const auto e = static_cast<std::int64_t>(stats.counts.size());
  const auto f = stats.frequencies();
  Tensor f_const = Tensor::from_data({1, e}, std::vector<double>(f.begin(), f.end()));
  Tensor gbar = scale(stats.gate_sum, 1.0 / static_cast<double>(stats.valid_tokens));
  Tensor dot = matmul(f_const, reshape(gbar, {e, 1}));  // [1, 1]
  return scale(reshape(dot, {1}), static_cast<double>(e));
}

MoeOutput moe_ffn_forward(const Tensor& z, const ExpertBank& bank, const RouterParams& r,
                          Mode mode, Rng& rng, const Mask& mask,
                          const std::vector<std::int64_t>* pinned) {
  const auto t = z.dim(0);
  const auto e = static_cast<std::int64_t>(bank.experts.size());
  if (t < 1) throw UsageError("moe_ffn_forward: no tokens");
  if (e < 1) throw UsageError("moe_ffn_forward: empty expert bank");
  if (r.w.dim(1) != e) {
    throw ShapeError("moe_ffn_forward: router width " + std::to_string(r.w.dim(1)) +
                     " does not match expert count " + std::to_string(e));
  }
  MoeOutput res;
  res.decision = route(z, r, mode, rng, pinned);
  for (auto c : res.decision.chosen) {
    if (c < 0 || c >= e) throw UsageError("moe_ffn_forward: routing index out of range");
  }

  // Dispatch: evaluate each expert once on the tokens routed to it.
  std::vector<Tensor> parts;
  for (std::int64_t ex = 0; ex < e; ++ex) {
    std::vector<std::int64_t> token_idx;
    for (std::int64_t i = 0; i < t; ++i)
      if (res.decision.chosen[i] == ex) token_idx.push_back(i);
    if (token_idx.empty()) continue;

    const FfnParams& expert = bank.experts[static_cast<std::size_t>(ex)];
    if (op_meter()) {
      const auto expert_params = expert.w1.numel() + expert.b1.numel() +
                                 expert.w2.numel() + expert.b2.numel();
      op_meter()->param_reads +=
          static_cast<std::uint64_t>(token_idx.size()) * static_cast<std::uint64_t>(expert_params);
    }
    Tensor sub = gather_rows(z, token_idx);
    Tensor out = ffn_forward(sub, expert);
    std::vector<std::int64_t> gate_idx(token_idx.size());
    for (std::size_t i = 0; i < token_idx.size(); ++i)
      gate_idx[i] = token_idx[i] * e + ex;
    Tensor gate = pick(res.decision.gates, gate_idx);
    parts.push_back(scatter_rows(scale_rows(out, gate), token_idx, t));
  }
  Tensor acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  res.out = acc;
  res.stats = collect_router_stats(res.decision.gates, res.decision.chosen, mask);
  return res;
}

}  // namespace smc
