#include "smc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace smc {

double lr_schedule(std::int64_t step, int warmup, double scale, int d) {
  if (step < 1) throw UsageError("lr_schedule: step must be >= 1");
  if (warmup < 1) throw UsageError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale / std::sqrt(static_cast<double>(d)) *
         std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, const OptimizerConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamOptimizer::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    auto grad = params_[pi].grad();
    if (grad.empty()) continue;
    auto vals = params_[pi].mutable_values();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (std::size_t i = 0; i < grad.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

namespace {

void check_term(double v, const char* term, std::int64_t step) {
  if (!std::isfinite(v)) {
    throw UsageError("training aborted at step " + std::to_string(step) +
                     ": non-finite " + std::string(term) + " loss");
  }
}

std::string freq_header(int c_count, int e_count) {
  std::ostringstream os;
  for (int c = 0; c < c_count; ++c)
    for (int e = 0; e < e_count; ++e) os << ",f_c" << c << "_e" << e;
  return os.str();
}

std::string metrics_row(std::int64_t step, double lr, const BatchLosses& l) {
  char buf[64];
  std::ostringstream os;
  os << step;
  std::snprintf(buf, sizeof(buf), ",%.9e", lr);
  os << buf;
  std::snprintf(buf, sizeof(buf), ",%.9e", l.total.item());
  os << buf;
  std::snprintf(buf, sizeof(buf), ",%.9e", l.nll);
  os << buf;
  std::snprintf(buf, sizeof(buf), ",%.9e", l.balance);
  os << buf;
  std::snprintf(buf, sizeof(buf), ",%.9e", l.kd);
  os << buf;
  for (const auto& module : l.freqs) {
    for (double f : module) {
      std::snprintf(buf, sizeof(buf), ",%.6f", f);
      os << buf;
    }
  }
  return os.str();
}

}  // namespace

BatchLosses compute_batch_losses(Model& model, const Dataset& data,
                                 const std::vector<std::size_t>& batch, Model* teacher,
                                 const LossWeights& w, Mode mode, StepRngs& rngs) {
  if (batch.empty()) throw UsageError("compute_batch_losses: empty batch");

  std::vector<Tensor> feats;
  feats.reserve(batch.size());
  for (auto idx : batch) feats.push_back(features_tensor(data[idx]));

  // The frozen teacher never records onto the tape; its pass happens first
  // so the student graph stays contiguous.
  std::optional<PackedRows> teacher_h;
  if (teacher != nullptr && w.beta > 0.0) {
    StepRngs teacher_rngs = StepRngs::for_step(Rng(0), 0);
    teacher_h = encoder_forward(feats, teacher->encoder, Mode::kEval, teacher_rngs).hidden;
  }

  EncoderResult enc = encoder_forward(feats, model.encoder, mode, rngs);

  // Per-utterance NLL, then batch mean.
  std::vector<std::vector<int>> prefixes;
  std::vector<std::vector<int>> targets;
  for (auto idx : batch) {
    const auto& toks = data[idx].tokens;
    std::vector<int> pre = {kSosId};
    pre.insert(pre.end(), toks.begin(), toks.end());
    std::vector<int> tgt(toks.begin(), toks.end());
    tgt.push_back(kEosId);
    prefixes.push_back(std::move(pre));
    targets.push_back(std::move(tgt));
  }
  PackedRows logits = decoder_forward(prefixes, enc.hidden, model.decoder, mode, rngs);
  Tensor nll_sum;
  std::int64_t off = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto len = logits.lens[b];
    Tensor lseg = row_slice(logits.x, off, off + len);
    Tensor n = nll_loss(lseg, targets[b], Mask(static_cast<std::size_t>(len), 1));
    nll_sum = b == 0 ? n : add(nll_sum, n);
    off += len;
  }
  Tensor nll = scale(nll_sum, 1.0 / static_cast<double>(batch.size()));

  // Balance losses: pool each module's stats over its G reuses.
  const int c_count = model.cfg.encoder.blocks_per_group;
  const int g_count = model.cfg.encoder.groups;
  std::vector<Tensor> balance_losses;
  BatchLosses out;
  for (int c = 0; c < c_count; ++c) {
    RouterStats pooled = enc.stats[c][0];
    for (int g = 1; g < g_count; ++g) pooled = RouterStats::pooled(pooled, enc.stats[c][g]);
    Tensor bl = load_balance_loss(pooled);
    out.balance += bl.item();
    out.freqs.push_back(pooled.frequencies());
    balance_losses.push_back(std::move(bl));
  }
  out.balance /= static_cast<double>(c_count);

  std::optional<Tensor> kd;
  if (teacher_h.has_value()) {
    Tensor kd_sum;
    std::int64_t hoff = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto len = enc.hidden.lens[b];
      Tensor hs = row_slice(enc.hidden.x, hoff, hoff + len);
      Tensor ht = row_slice(teacher_h->x, hoff, hoff + len);
      Tensor k = kd_loss(hs, ht);
      kd_sum = b == 0 ? k : add(kd_sum, k);
      hoff += len;
    }
    kd = scale(kd_sum, 1.0 / static_cast<double>(batch.size()));
    out.kd = kd->item();
  }

  out.nll = nll.item();
  out.total = total_loss(nll, balance_losses, kd, w);
  return out;
}

TrainResult train(const ExperimentConfig& cfg) {
  cfg.model.validate();
  if (cfg.train.epochs < 1) throw UsageError("train: epochs must be >= 1");
  Dataset data = load_dataset(cfg.data.train_features, cfg.data.train_transcripts);
  if (data.empty()) throw UsageError("train: dataset is empty");

  std::filesystem::create_directories(cfg.train.out_dir);
  const std::string model_text = model_config_text(cfg.model);

  Rng base(cfg.train.seed);
  Rng init_rng = base.stream("init");
  Model model = build_model(cfg.model, &init_rng);

  if (!cfg.train.init_checkpoint.empty()) {
    const std::string stored = read_checkpoint_config(cfg.train.init_checkpoint);
    if (text_hash(stored) != text_hash(model_text)) {
      throw UsageError("init checkpoint " + cfg.train.init_checkpoint +
                       " was written for a different architecture");
    }
    load_checkpoint(cfg.train.init_checkpoint, model.registry);
  }

  std::optional<LoadedModel> teacher;
  if (cfg.loss.beta > 0.0 && !cfg.train.teacher_checkpoint.empty()) {
    teacher = load_model_from_checkpoint(cfg.train.teacher_checkpoint, /*frozen=*/true);
    const auto& te = teacher->model.cfg.encoder;
    const auto& se = cfg.model.encoder;
    if (te.d != se.d || te.feature_dim != se.feature_dim) {
      throw UsageError(
          "distillation teacher is incompatible: encoder dim and feature_dim must match "
          "the student");
    }
  }
  Model* teacher_ptr = teacher.has_value() ? &teacher->model : nullptr;

  AdamOptimizer opt(model.registry.trainable(), cfg.optimizer);
  const std::string metrics_path = cfg.train.out_dir + "/metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw UsageError("cannot open metrics log: " + metrics_path);
  metrics << "step,lr,total,nll,balance,kd"
          << freq_header(cfg.model.encoder.blocks_per_group, cfg.model.encoder.experts)
          << "\n";

  auto epoch_batches = [&](int epoch) {
    Rng order = base.stream("batch_order", static_cast<std::uint64_t>(epoch));
    return make_batches(data, cfg.train.batch_size, order);
  };

  // Initial evaluation row: eval-mode losses on the first batch, before any
  // update. A student cloned from its teacher logs kd = 0 here.
  {
    auto first = epoch_batches(0);
    StepRngs rngs = StepRngs::for_step(base, 0);
    BatchLosses l =
        compute_batch_losses(model, data, first[0], teacher_ptr, cfg.loss, Mode::kEval, rngs);
    metrics << metrics_row(0, 0.0, l) << "\n";
  }

  std::int64_t step = 0;
  TrainResult res;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(epoch)) {
      ++step;
      opt.zero_grad();
      Tape tape;
      BatchLosses losses;
      try {
        TapeScope scope(tape);
        StepRngs rngs = StepRngs::for_step(base, static_cast<std::uint64_t>(step));
        losses = compute_batch_losses(model, data, batch, teacher_ptr, cfg.loss,
                                      Mode::kTrain, rngs);
        check_term(losses.nll, "nll", step);
        check_term(losses.balance, "balance", step);
        check_term(losses.kd, "kd", step);
        check_term(losses.total.item(), "total", step);
        tape.backward(losses.total);
      } catch (const NonFiniteError& e) {
        throw UsageError("training aborted at step " + std::to_string(step) + ": " +
                         e.what());
      }
      const double lr = lr_schedule(step, cfg.optimizer.warmup, cfg.optimizer.lr_scale,
                                    cfg.model.encoder.d);
      opt.step(lr);
      tape.clear();
      metrics << metrics_row(step, lr, losses) << "\n";
      if (cfg.train.save_every > 0 && step % cfg.train.save_every == 0) {
        save_checkpoint(cfg.train.out_dir + "/checkpoint-" + std::to_string(step) + ".ckpt",
                        model.registry, model_text, step);
      }
    }
  }
  res.steps = step;
  res.final_checkpoint = cfg.train.out_dir + "/final.ckpt";
  save_checkpoint(res.final_checkpoint, model.registry, model_text, step);
  res.metrics_log = metrics_path;
  return res;
}

LoadedModel load_model_from_checkpoint(const std::string& path, bool frozen) {
  const ModelConfig cfg = parse_model_config(read_checkpoint_config(path));
  LoadedModel lm{build_model(cfg, /*init_rng=*/nullptr, frozen), 0};
  lm.step = load_checkpoint(path, lm.model.registry);
  return lm;
}

double evaluate_dataset(Model& model, const Dataset& data, int beam,
                        std::ostream* hyp_out) {
  if (data.empty()) throw UsageError("evaluate: dataset is empty");
  if (beam < 1) throw UsageError("evaluate: beam must be >= 1");
  std::int64_t total_dist = 0, total_ref = 0;
  std::vector<std::pair<std::string, std::string>> hyp_lines;
  for (const auto& utt : data) {
    const int max_len = static_cast<int>(2 * utt.tokens.size() + 4);
    Hypothesis hyp = beam_search(features_tensor(utt), model, beam, max_len);
    total_dist += edit_distance(hyp.tokens, utt.tokens);
    total_ref += static_cast<std::int64_t>(utt.tokens.size());
    if (hyp_out != nullptr) {
      std::ostringstream line;
      line << utt.id;
      for (int t : hyp.tokens) line << " " << t;
      char buf[32];
      std::snprintf(buf, sizeof(buf), " %.6f", hyp.score);
      line << buf;
      hyp_lines.emplace_back(utt.id, line.str());
    }
  }
  if (hyp_out != nullptr) {
    // Emit in utterance-id order so the report is independent of dataset
    // order (and of any future decode parallelism).
    std::sort(hyp_lines.begin(), hyp_lines.end());
    for (const auto& [id, line] : hyp_lines) (*hyp_out) << line << "\n";
  }
  if (total_ref == 0) throw UsageError("evaluate: reference corpus has no tokens");
  return static_cast<double>(total_dist) / static_cast<double>(total_ref);
}

}  // namespace smc
