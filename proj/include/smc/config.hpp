#pragma once

#include <cstdint>
#include <string>

#include "smc/seq2seq.hpp"

namespace smc {

struct OptimizerConfig {
  double lr_scale = 1.0;
  int warmup = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

struct TrainSettings {
  std::uint64_t seed = 1;
  int epochs = 1;
  int batch_size = 4;
  int save_every = 0;  // steps between checkpoints; 0 = final only
  std::string out_dir = "run";
  std::string init_checkpoint;     // optional warm start
  std::string teacher_checkpoint;  // required for distillation (beta > 0)
};

struct DataConfig {
  std::string train_features;
  std::string train_transcripts;
  std::string eval_features;
  std::string eval_transcripts;
};

struct SyntheticSpec {
  int vocab = 8;           // includes <pad>, <sos>, <eos>
  int frames_per_token = 8;
  int feature_dim = 16;
  std::uint64_t pattern_seed = 7;
  double noise_std = 0.05;
  int n_utts = 64;
  int min_tokens = 3;
  int max_tokens = 8;
  std::string out_features = "synth.feats";
  std::string out_transcripts = "synth.text";

  void validate() const;
};

struct ExperimentConfig {
  ModelConfig model;
  LossWeights loss;
  OptimizerConfig optimizer;
  TrainSettings train;
  DataConfig data;
  SyntheticSpec synth;
};

/// Flat `section.key = value` text format; '#' starts a comment. Unknown
/// keys are hard errors so ablation configs cannot silently typo.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Canonical architecture snapshot (encoder + decoder keys only) used for
/// checkpoint compatibility. Byte-stable for a given configuration.
std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

std::uint64_t text_hash(const std::string& text);

}  // namespace smc
