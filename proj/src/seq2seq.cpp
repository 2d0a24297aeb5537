#include "smc/seq2seq.hpp"

#include <algorithm>
#include <cmath>

namespace smc {

void DecoderConfig::validate() const {
  if (vocab < 3) throw UsageError("decoder config: vocab must be >= 3");
  if (blocks < 1 || heads < 1 || d < 1 || d % heads != 0 || d_ff < 1) {
    throw UsageError("decoder config: invalid dimensions");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw UsageError("decoder config: invalid dropout rate");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (decoder.d != encoder.d) {
    throw UsageError("model config: decoder dim must equal encoder dim");
  }
}

namespace {

AttnParams build_attn(ParamBuilder& b, const std::string& p, int d, int heads) {
  AttnParams a;
  a.heads = heads;
  a.wq = b.matrix(p + ".wq", d, d, ParamCategory::kDecoder);
  a.bq = b.zeros(p + ".bq", {d}, ParamCategory::kDecoder);
  a.wk = b.matrix(p + ".wk", d, d, ParamCategory::kDecoder);
  a.bk = b.zeros(p + ".bk", {d}, ParamCategory::kDecoder);
  a.wv = b.matrix(p + ".wv", d, d, ParamCategory::kDecoder);
  a.bv = b.zeros(p + ".bv", {d}, ParamCategory::kDecoder);
  a.wo = b.matrix(p + ".wo", d, d, ParamCategory::kDecoder);
  a.bo = b.zeros(p + ".bo", {d}, ParamCategory::kDecoder);
  return a;
}

/// Multi-head attention between packed sequences with matching segment
/// counts. Causal mode restricts keys of segment s to positions <= query
/// position; otherwise the key mask marks valid rows of `kv`.
Tensor multi_head_attention(const PackedRows& q_seq, const PackedRows& kv_seq,
                            const AttnParams& p, const Mask& kv_mask, bool causal) {
  if (q_seq.lens.size() != kv_seq.lens.size()) {
    throw ShapeError("attention: query/key segment counts differ");
  }
  const auto d = q_seq.x.dim(1);
  const int heads = p.heads;
  const auto dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = add_bias(matmul(q_seq.x, p.wq), p.bq);
  Tensor k = add_bias(matmul(kv_seq.x, p.wk), p.bk);
  Tensor v = add_bias(matmul(kv_seq.x, p.wv), p.bv);

  std::vector<Tensor> seg_outs;
  std::int64_t qoff = 0, koff = 0;
  for (std::size_t s = 0; s < q_seq.lens.size(); ++s) {
    const auto tq = q_seq.lens[s], tk = kv_seq.lens[s];
    Mask mask;
    if (causal) {
      if (tq != tk) throw ShapeError("attention: causal mask requires square segments");
      mask.assign(static_cast<std::size_t>(tq * tk), 0);
      for (std::int64_t i = 0; i < tq; ++i)
        for (std::int64_t j = 0; j <= i; ++j)
          mask[i * tk + j] = kv_mask[koff + j] ? 1 : 0;
    } else {
      mask.assign(kv_mask.begin() + koff, kv_mask.begin() + koff + tk);
    }
    Tensor qs = row_slice(q, qoff, qoff + tq);
    Tensor ks = row_slice(k, koff, koff + tk);
    Tensor vs = row_slice(v, koff, koff + tk);
    std::vector<Tensor> head_ctx;
    for (int hh = 0; hh < heads; ++hh) {
      const auto c0 = hh * dh, c1 = (hh + 1) * dh;
      Tensor qh = col_slice(qs, c0, c1);
      Tensor kh = col_slice(ks, c0, c1);
      Tensor vh = col_slice(vs, c0, c1);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      Tensor att = masked_softmax(scores, mask);
      head_ctx.push_back(matmul(att, vh));
    }
    seg_outs.push_back(concat_cols(head_ctx));
    qoff += tq;
    koff += tk;
  }
  Tensor ctx = seg_outs.size() == 1 ? seg_outs[0] : concat_rows(seg_outs);
  return add_bias(matmul(ctx, p.wo), p.bo);
}

}  // namespace

DecoderParams build_decoder(const DecoderConfig& cfg, ParamRegistry& reg, Rng* init_rng,
                            bool frozen, const std::string& prefix) {
  cfg.validate();
  ParamBuilder b(reg, init_rng, frozen);
  DecoderParams p;
  p.cfg = cfg;
  p.embedding = b.matrix(prefix + "dec.embedding", cfg.vocab, cfg.d,
                         ParamCategory::kDecoder,
                         1.0 / std::sqrt(static_cast<double>(cfg.d)));
  for (int i = 0; i < cfg.blocks; ++i) {
    const std::string bp = prefix + "dec.b" + std::to_string(i);
    DecoderBlockParams blk;
    blk.ln_self.gamma = b.ones(bp + ".ln_self.gamma", {cfg.d}, ParamCategory::kDecoder);
    blk.ln_self.beta = b.zeros(bp + ".ln_self.beta", {cfg.d}, ParamCategory::kDecoder);
    blk.self_attn = build_attn(b, bp + ".self", cfg.d, cfg.heads);
    blk.ln_cross.gamma = b.ones(bp + ".ln_cross.gamma", {cfg.d}, ParamCategory::kDecoder);
    blk.ln_cross.beta = b.zeros(bp + ".ln_cross.beta", {cfg.d}, ParamCategory::kDecoder);
    blk.cross_attn = build_attn(b, bp + ".cross", cfg.d, cfg.heads);
    blk.ln_ffn.gamma = b.ones(bp + ".ln_ffn.gamma", {cfg.d}, ParamCategory::kDecoder);
    blk.ln_ffn.beta = b.zeros(bp + ".ln_ffn.beta", {cfg.d}, ParamCategory::kDecoder);
    blk.ffn.w1 = b.matrix(bp + ".ffn.w1", cfg.d, cfg.d_ff, ParamCategory::kDecoder);
    blk.ffn.b1 = b.zeros(bp + ".ffn.b1", {cfg.d_ff}, ParamCategory::kDecoder);
    blk.ffn.w2 = b.matrix(bp + ".ffn.w2", cfg.d_ff, cfg.d, ParamCategory::kDecoder);
    blk.ffn.b2 = b.zeros(bp + ".ffn.b2", {cfg.d}, ParamCategory::kDecoder);
    p.blocks.push_back(std::move(blk));
  }
  p.ln_final.gamma = b.ones(prefix + "dec.ln_final.gamma", {cfg.d}, ParamCategory::kDecoder);
  p.ln_final.beta = b.zeros(prefix + "dec.ln_final.beta", {cfg.d}, ParamCategory::kDecoder);
  p.out_w = b.matrix(prefix + "dec.out.w", cfg.d, cfg.vocab, ParamCategory::kDecoder);
  p.out_b = b.zeros(prefix + "dec.out.b", {cfg.vocab}, ParamCategory::kDecoder);
  return p;
}

Model build_model(const ModelConfig& cfg, Rng* init_rng, bool frozen) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.encoder = build_encoder(cfg.encoder, m.registry, init_rng, frozen);
  m.decoder = build_decoder(cfg.decoder, m.registry, init_rng, frozen);
  return m;
}

PackedRows decoder_forward(const std::vector<std::vector<int>>& prefixes,
                           const PackedRows& h, DecoderParams& p, Mode mode,
                           StepRngs& rngs) {
  if (prefixes.size() != h.lens.size()) {
    throw UsageError("decoder_forward: prefix count does not match encoder segments");
  }
  const auto d = p.cfg.d;
  std::vector<std::int64_t> flat_ids;
  std::vector<std::int64_t> lens;
  for (const auto& pre : prefixes) {
    if (pre.empty()) throw UsageError("decoder_forward: empty prefix");
    for (int id : pre) {
      if (id < 0 || id >= p.cfg.vocab) {
        throw UsageError("decoder_forward: token id " + std::to_string(id) +
                         " outside vocabulary");
      }
      flat_ids.push_back(id);
    }
    lens.push_back(static_cast<std::int64_t>(pre.size()));
  }

  Tensor emb = gather_rows(p.embedding, flat_ids);
  emb = scale(emb, std::sqrt(static_cast<double>(d)));
  // Absolute sinusoidal positions, restarting at each segment.
  std::vector<std::int64_t> positions;
  for (auto len : lens)
    for (std::int64_t t = 0; t < len; ++t) positions.push_back(t);
  Tensor z = add(emb, sinusoid_embedding(positions, d));

  PackedRows zs{z, lens};
  const Mask self_mask(static_cast<std::size_t>(zs.total_rows()), 1);
  const Mask enc_mask(static_cast<std::size_t>(h.total_rows()), 1);
  const double drop = p.cfg.dropout;
  for (auto& blk : p.blocks) {
    Tensor a = multi_head_attention(PackedRows{layer_norm(zs.x, blk.ln_self), lens},
                                    zs, blk.self_attn, self_mask, /*causal=*/true);
    zs.x = add(zs.x, dropout(a, drop, mode, rngs.dropout));
    Tensor c = multi_head_attention(PackedRows{layer_norm(zs.x, blk.ln_cross), lens}, h,
                                    blk.cross_attn, enc_mask, /*causal=*/false);
    zs.x = add(zs.x, dropout(c, drop, mode, rngs.dropout));
    Tensor f = ffn_forward(layer_norm(zs.x, blk.ln_ffn), blk.ffn);
    zs.x = add(zs.x, dropout(f, drop, mode, rngs.dropout));
  }
  zs.x = add_bias(matmul(layer_norm(zs.x, p.ln_final), p.out_w), p.out_b);
  return zs;
}

Tensor nll_loss(const Tensor& logits, const std::vector<int>& targets, const Mask& valid) {
  if (logits.shape().size() != 2) {
    throw ShapeError("nll_loss expects [S, V] logits");
  }
  const auto s = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != s ||
      static_cast<std::int64_t>(valid.size()) != s) {
    throw ShapeError("nll_loss: target/mask length does not match logit rows");
  }
  std::vector<std::int64_t> flat;
  for (std::int64_t i = 0; i < s; ++i) {
    if (!valid[i]) continue;
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= v) throw UsageError("nll_loss: target id outside vocabulary");
    flat.push_back(i * v + y);
  }
  if (flat.empty()) throw UsageError("nll_loss: no valid target positions");
  Tensor lp = pick(log_softmax(logits), flat);
  return scale(sum_all(lp), -1.0 / static_cast<double>(flat.size()));
}

Tensor kd_loss(const Tensor& h, const Tensor& h_teacher) {
  if (h.shape() != h_teacher.shape()) {
    throw ShapeError("kd_loss: shape mismatch " + shape_str(h.shape()) + " vs " +
                     shape_str(h_teacher.shape()));
  }
  const auto t = h.dim(0);
  Tensor norms = row_norms(sub(h, h_teacher));
  return scale(sum_all(norms), 1.0 / static_cast<double>(t));
}

Tensor total_loss(const Tensor& nll, const std::vector<Tensor>& balance_losses,
                  const std::optional<Tensor>& kd, const LossWeights& w) {
  Tensor loss = nll;
  if (!balance_losses.empty() && w.alpha != 0.0) {
    Tensor bal = balance_losses[0];
    for (std::size_t i = 1; i < balance_losses.size(); ++i)
      bal = add(bal, balance_losses[i]);
    loss = add(loss, scale(bal, w.alpha / static_cast<double>(balance_losses.size())));
  }
  if (kd.has_value() && w.beta != 0.0) {
    loss = add(loss, scale(*kd, w.beta));
  }
  return loss;
}

Hypothesis beam_search(const Tensor& features, Model& model, int beam, int max_len) {
  if (beam < 1) throw UsageError("beam_search: beam must be >= 1");
  if (max_len < 1) throw UsageError("beam_search: max_len must be >= 1");

  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  EncoderResult enc = encoder_forward({features}, model.encoder, Mode::kEval, rngs);
  const int v = model.decoder.cfg.vocab;

  struct Beam {
    std::vector<int> tokens;  // generated ids (may end with <eos>)
    double logp = 0.0;
    double normalized() const {
      return logp / static_cast<double>(std::max<std::size_t>(tokens.size(), 1));
    }
  };
  std::vector<Beam> live = {Beam{}};
  std::vector<Beam> finished;

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      std::size_t src;
      int token;
      double logp;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(v));
    for (std::size_t i = 0; i < live.size(); ++i) {
      std::vector<int> prefix;
      prefix.push_back(kSosId);
      prefix.insert(prefix.end(), live[i].tokens.begin(), live[i].tokens.end());
      PackedRows logits =
          decoder_forward({prefix}, enc.hidden, model.decoder, Mode::kEval, rngs);
      Tensor last =
          log_softmax(row_slice(logits.x, logits.x.dim(0) - 1, logits.x.dim(0)));
      auto lv = last.values();
      for (int tok = 0; tok < v; ++tok) {
        if (tok == kPadId || tok == kSosId) continue;  // never emitted
        cands.push_back(Cand{i, tok, live[i].logp + lv[tok]});
      }
    }
    const std::size_t keep = std::min<std::size_t>(cands.size(),
                                                   static_cast<std::size_t>(beam));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.src != b.src) return a.src < b.src;
                        return a.token < b.token;
                      });
    std::vector<Beam> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Beam nb = live[cands[i].src];
      nb.tokens.push_back(cands[i].token);
      nb.logp = cands[i].logp;
      if (cands[i].token == kEosId) {
        finished.push_back(std::move(nb));
      } else {
        next.push_back(std::move(nb));
      }
    }
    live = std::move(next);
  }

  const Beam* best = nullptr;
  for (const auto& b : finished) {
    if (best == nullptr || b.normalized() > best->normalized()) best = &b;
  }
  if (best == nullptr) {
    for (const auto& b : live) {
      if (best == nullptr || b.normalized() > best->normalized()) best = &b;
    }
  }
  if (best == nullptr) throw UsageError("beam_search: no hypothesis produced");

  Hypothesis hyp;
  hyp.score = best->normalized();
  for (int tok : best->tokens) {
    if (tok != kEosId) hyp.tokens.push_back(tok);
  }
  return hyp;
}

}  // namespace smc
