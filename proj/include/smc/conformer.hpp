#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "smc/moe.hpp"
#include "smc/nn.hpp"
#include "smc/params.hpp"

namespace smc {

struct EncoderConfig {
  int blocks_per_group = 1;  // C: block positions within a group
  int groups = 1;            // G: group reuses of the block stack
  int experts = 1;           // E
  int d = 256;
  int heads = 4;
  int kernel = 15;
  int d_ff = 1024;
  int feature_dim = 80;
  int frontend_channels = 32;
  double dropout = 0.1;
  double noise_std = 0.1;
  bool share_norms = false;    // true collapses per-group norms into one copy
  bool share_routers = false;  // true collapses per-group routers into one copy

  void validate() const;
};

/// Weights of one block position, shared by every group.
struct BlockWeights {
  FfnParams ffn1;
  MhsaParams mhsa;
  ConvModuleParams conv;
  ExpertBank experts;
};

/// Normalization layers of one (position, group) instance.
struct BlockNorms {
  NormParams ln_ffn1, ln_mhsa, ln_conv, ln_moe, ln_final;
  BatchNormParams bn;
};

struct EncoderParams {
  EncoderConfig cfg;
  FrontendParams frontend;
  std::vector<BlockWeights> blocks;  // [C]
  // [C][G]; entries alias one object per position when the share flags are
  // set, so parameter identity (not just equality) expresses the sharing.
  std::vector<std::vector<std::shared_ptr<BlockNorms>>> norms;
  std::vector<std::vector<std::shared_ptr<RouterParams>>> routers;
};

/// Per-step random streams. Dropout and gate noise draw from independent
/// sources so toggling one never shifts the other's sequence.
struct StepRngs {
  Rng dropout;
  Rng noise;

  static StepRngs for_step(const Rng& base, std::uint64_t step);
};

/// Router decisions for every block application, ordered (g, c). Used to
/// hold routing fixed across the perturbed evaluations of a gradient check.
struct PinnedRouting {
  std::vector<std::vector<std::int64_t>> per_application;
};

struct BlockResult {
  Tensor out;
  RouterStats stats;
  RoutingDecision routing;
};

/// One MoE-conformer block: macaron half-step FFN, relative-position MHSA,
/// convolution module, MoE half-step FFN, each pre-normed inside its
/// residual branch, with a final layer norm. `profile4`, when given,
/// receives the mean per-frame L2 distance between input and output of the
/// four transformations in execution order.
BlockResult conformer_block_forward(const PackedRows& z, const BlockWeights& w,
                                    BlockNorms& norms, const RouterParams& router,
                                    double dropout_rate, Mode mode, StepRngs& rngs,
                                    const Mask& mask,
                                    const std::vector<std::int64_t>* pinned = nullptr,
                                    double* profile4 = nullptr);

struct L2ProfileRow {
  int index;
  int group;
  int block;
  std::string transformation;
  double distance;
};

struct EncoderResult {
  PackedRows hidden;
  // Raw per-application stats indexed [C][G]; the balance loss pools over G.
  std::vector<std::vector<RouterStats>> stats;
  // Expert chosen per token for each block application, ordered (g, c);
  // feed back as PinnedRouting to replay identical routing.
  std::vector<std::vector<std::int64_t>> routing_by_application;
  std::vector<L2ProfileRow> profile;  // filled only when requested
};

/// Frontend subsampling followed by the grouped block stack in order
/// g = 0..G-1, c = 0..C-1. Block (c, g) uses the shared weights of
/// position c with the (c, g) norms and router.
EncoderResult encoder_forward(const std::vector<Tensor>& features, EncoderParams& params,
                              Mode mode, StepRngs& rngs, bool collect_profile = false,
                              const PinnedRouting* pinned = nullptr);

/// Eval-mode L2 profile of a single utterance.
std::vector<L2ProfileRow> l2_distance_profile(const Tensor& features, EncoderParams& params);

EncoderParams build_encoder(const EncoderConfig& cfg, ParamRegistry& reg, Rng* init_rng,
                            bool frozen = false, const std::string& prefix = "");

struct ParamReport {
  std::int64_t frontend = 0;
  std::int64_t ffn = 0;
  std::int64_t mhsa = 0;
  std::int64_t conv = 0;
  std::int64_t experts = 0;
  std::int64_t routers = 0;
  std::int64_t norms = 0;

  std::int64_t total() const;
  std::string table() const;
  std::string key_values() const;
};

/// Exact encoder parameter accounting honoring the sharing topology:
/// shared weights count once per block position, norms and routers once per
/// (position, group) when individual. The norms category includes
/// batch-norm running statistics.
ParamReport count_params(const EncoderConfig& cfg);

}  // namespace smc
