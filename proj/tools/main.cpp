#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "smc/train.hpp"

namespace {

smc::ExperimentConfig load_with_overrides(const std::string& config_path,
                                          const std::optional<std::uint64_t>& seed) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  if (seed.has_value()) cfg.train.seed = *seed;
  return cfg;
}

int run_synth_data(const std::string& config_path, std::optional<std::uint64_t> seed) {
  smc::ExperimentConfig cfg = load_with_overrides(config_path, seed);
  smc::Dataset data = smc::synth_dataset(cfg.synth, cfg.synth.n_utts, cfg.train.seed);
  smc::write_features(cfg.synth.out_features, data);
  smc::write_transcripts(cfg.synth.out_transcripts, data);
  std::int64_t frames = 0;
  for (const auto& u : data) frames += u.frames;
  std::cout << "wrote " << data.size() << " utterances (" << frames << " frames) to "
            << cfg.synth.out_features << " / " << cfg.synth.out_transcripts << "\n";
  return 0;
}

int run_train(const std::string& config_path, std::optional<std::uint64_t> seed,
              bool require_teacher) {
  smc::ExperimentConfig cfg = load_with_overrides(config_path, seed);
  if (require_teacher && cfg.train.teacher_checkpoint.empty()) {
    throw smc::UsageError("distill requires train.teacher_checkpoint in the config");
  }
  smc::TrainResult res = smc::train(cfg);
  std::cout << "trained " << res.steps << " steps\n"
            << "checkpoint: " << res.final_checkpoint << "\n"
            << "metrics: " << res.metrics_log << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& checkpoint, int beam) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  const std::string stored = smc::read_checkpoint_config(checkpoint);
  if (smc::text_hash(stored) != smc::text_hash(smc::model_config_text(cfg.model))) {
    throw smc::UsageError("checkpoint " + checkpoint +
                          " does not match the architecture in " + config_path);
  }
  smc::LoadedModel lm = smc::load_model_from_checkpoint(checkpoint);
  smc::Dataset data = smc::load_dataset(cfg.data.eval_features, cfg.data.eval_transcripts);
  const double ter = smc::evaluate_dataset(lm.model, data, beam, &std::cout);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", ter);
  std::cout << "ter " << buf << "\n";
  return 0;
}

int run_count_params(const std::string& config_path, bool kv) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  smc::ParamReport rep = smc::count_params(cfg.model.encoder);
  std::cout << (kv ? rep.key_values() : rep.table());
  return 0;
}

int run_l2_curve(const std::string& config_path, const std::string& checkpoint, int utt) {
  smc::ExperimentConfig cfg = smc::load_config(config_path);
  const std::string stored = smc::read_checkpoint_config(checkpoint);
  if (smc::text_hash(stored) != smc::text_hash(smc::model_config_text(cfg.model))) {
    throw smc::UsageError("checkpoint " + checkpoint +
                          " does not match the architecture in " + config_path);
  }
  smc::LoadedModel lm = smc::load_model_from_checkpoint(checkpoint);
  smc::Dataset data = smc::load_dataset(cfg.data.eval_features, cfg.data.eval_transcripts);
  if (utt < 0 || static_cast<std::size_t>(utt) >= data.size()) {
    throw smc::UsageError("l2-curve: utterance index " + std::to_string(utt) +
                          " outside dataset of size " + std::to_string(data.size()));
  }
  auto rows = smc::l2_distance_profile(smc::features_tensor(data[static_cast<std::size_t>(utt)]),
                                       lm.model.encoder);
  std::cout << "index,group,block,transformation,distance\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.9e", r.distance);
    std::cout << r.index << "," << r.group << "," << r.block << "," << r.transformation
              << "," << buf << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parameter-efficient MoE-conformer toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint;
  std::optional<std::uint64_t> seed;
  int beam = 4;
  int utt = 0;
  bool kv = false;

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic dataset");
  synth->add_option("--config", config_path, "experiment config")->required();
  synth->add_option("--seed", seed, "override train.seed");

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "experiment config")->required();
  tr->add_option("--seed", seed, "override train.seed");

  auto* dist = app.add_subcommand("distill", "train with a frozen teacher");
  dist->add_option("--config", config_path, "experiment config")->required();
  dist->add_option("--seed", seed, "override train.seed");

  auto* ev = app.add_subcommand("eval", "decode a dataset and report token error rate");
  ev->add_option("--config", config_path, "experiment config")->required();
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ev->add_option("--beam", beam, "beam width");

  auto* cp = app.add_subcommand("count-params", "encoder parameter accounting");
  cp->add_option("--config", config_path, "experiment config")->required();
  cp->add_flag("--kv", kv, "emit machine-readable key=value lines");

  auto* l2 = app.add_subcommand("l2-curve", "per-transformation L2 distance profile");
  l2->add_option("--config", config_path, "experiment config")->required();
  l2->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  l2->add_option("--utt", utt, "utterance index in the eval set");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return run_synth_data(config_path, seed);
    if (tr->parsed()) return run_train(config_path, seed, false);
    if (dist->parsed()) return run_train(config_path, seed, true);
    if (ev->parsed()) return run_eval(config_path, checkpoint, beam);
    if (cp->parsed()) return run_count_params(config_path, kv);
    if (l2->parsed()) return run_l2_curve(config_path, checkpoint, utt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
