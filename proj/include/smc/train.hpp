#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smc/checkpoint.hpp"
#include "smc/data.hpp"
#include "smc/seq2seq.hpp"

namespace smc {

/// Noam form: scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5).
double lr_schedule(std::int64_t step, int warmup, double scale, int d);

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, const OptimizerConfig& cfg);
  void zero_grad();
  /// One update with the given learning rate; parameters without gradients
  /// this step are left untouched.
  void step(double lr);
  std::int64_t updates() const { return t_; }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

struct BatchLosses {
  Tensor total;
  double nll = 0.0;
  double balance = 0.0;  // mean per-module balance loss, before alpha
  double kd = 0.0;       // raw distillation loss, before beta
  std::vector<std::vector<double>> freqs;  // [C][E] expert frequencies
};

/// Forward pass and total loss for one batch. Router statistics are pooled
/// over the G reuses of each module position before the balance loss.
BatchLosses compute_batch_losses(Model& model, const Dataset& data,
                                 const std::vector<std::size_t>& batch, Model* teacher,
                                 const LossWeights& w, Mode mode, StepRngs& rngs);

struct TrainResult {
  std::string final_checkpoint;
  std::string metrics_log;
  std::int64_t steps = 0;
};

/// Mini-batch training with Adam and the inverse-square-root schedule.
/// Writes one metrics row per step (plus an initial eval-mode row at step 0)
/// and periodic/final checkpoints under train.out_dir. Fully deterministic
/// for a given config and seed. A teacher checkpoint with loss.beta > 0
/// adds the distillation term.
TrainResult train(const ExperimentConfig& cfg);

struct LoadedModel {
  Model model;
  std::int64_t step = 0;
};

/// Rebuilds the architecture from the checkpoint's config snapshot and
/// loads the weights.
LoadedModel load_model_from_checkpoint(const std::string& path, bool frozen = false);

/// Corpus token error rate: summed edit distance over summed reference
/// length, decoding each utterance by beam search. Hypothesis lines
/// ("id tokens... score") go to hyp_out when given.
double evaluate_dataset(Model& model, const Dataset& data, int beam,
                        std::ostream* hyp_out = nullptr);

}  // namespace smc
