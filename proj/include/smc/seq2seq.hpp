#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smc/conformer.hpp"

namespace smc {

// Reserved token ids shared by the data pipeline and the decoder.
inline constexpr int kPadId = 0;
inline constexpr int kSosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstContentId = 3;

struct DecoderConfig {
  int blocks = 4;
  int heads = 4;
  int d_ff = 1024;
  int vocab = 0;  // includes <pad>, <sos>, <eos>
  int d = 256;    // must match the encoder dim
  double dropout = 0.1;

  void validate() const;
};

struct AttnParams {
  int heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct DecoderBlockParams {
  NormParams ln_self, ln_cross, ln_ffn;
  AttnParams self_attn, cross_attn;
  FfnParams ffn;
};

struct DecoderParams {
  DecoderConfig cfg;
  Tensor embedding;  // V x d
  std::vector<DecoderBlockParams> blocks;
  NormParams ln_final;
  Tensor out_w, out_b;  // d x V
};

struct LossWeights {
  double alpha = 0.01;  // balance weight
  double beta = 0.005;  // distillation weight
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  void validate() const;
};

struct Model {
  ModelConfig cfg;
  EncoderParams encoder;
  DecoderParams decoder;
  ParamRegistry registry;
};

Model build_model(const ModelConfig& cfg, Rng* init_rng, bool frozen = false);

DecoderParams build_decoder(const DecoderConfig& cfg, ParamRegistry& reg, Rng* init_rng,
                            bool frozen = false, const std::string& prefix = "");

/// Teacher-forced decoder pass over a batch of prefixes. `prefixes[b]`
/// starts with <sos>; segment b of the result holds one logit row per
/// prefix position. Self-attention is causally masked; cross-attention
/// attends to encoder segment b.
PackedRows decoder_forward(const std::vector<std::vector<int>>& prefixes,
                           const PackedRows& h, DecoderParams& p, Mode mode,
                           StepRngs& rngs);

/// -(1/S) sum_s log P(y_s) over valid target positions of one utterance.
Tensor nll_loss(const Tensor& logits, const std::vector<int>& targets, const Mask& valid);

/// (1/T) sum_t || h_t - h'_t ||_2, the unsquared per-frame distance.
Tensor kd_loss(const Tensor& h, const Tensor& h_teacher);

/// L = nll + alpha * mean(balance) + beta * kd (kd omitted when absent).
Tensor total_loss(const Tensor& nll, const std::vector<Tensor>& balance_losses,
                  const std::optional<Tensor>& kd, const LossWeights& w);

struct Hypothesis {
  std::vector<int> tokens;  // content tokens, <sos>/<eos> stripped
  double score = 0.0;       // length-normalized log probability
};

/// Length-normalized beam search from <sos>; hypotheses ending in <eos> are
/// finalized. Returns the best finalized hypothesis, or the best unfinished
/// one if nothing finalizes within max_len steps.
Hypothesis beam_search(const Tensor& features, Model& model, int beam, int max_len);

}  // namespace smc
