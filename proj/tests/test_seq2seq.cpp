#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "smc/seq2seq.hpp"
#include "testutil.hpp"

using namespace smc;
using smc::testing::finite_diff_check;
using smc::testing::max_abs_diff;
using smc::testing::random_tensor;

namespace {

ModelConfig tiny_model_config(int vocab, int c = 1, int g = 1, int e = 1) {
  ModelConfig cfg;
  cfg.encoder.blocks_per_group = c;
  cfg.encoder.groups = g;
  cfg.encoder.experts = e;
  cfg.encoder.d = 8;
  cfg.encoder.heads = 2;
  cfg.encoder.kernel = 3;
  cfg.encoder.d_ff = 16;
  cfg.encoder.feature_dim = 8;
  cfg.encoder.frontend_channels = 2;
  cfg.encoder.dropout = 0.0;
  cfg.encoder.noise_std = 0.0;
  cfg.decoder.blocks = 1;
  cfg.decoder.heads = 2;
  cfg.decoder.d_ff = 16;
  cfg.decoder.vocab = vocab;
  cfg.decoder.d = 8;
  cfg.decoder.dropout = 0.0;
  return cfg;
}

PackedRows encode(Model& m, const Tensor& feats) {
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  return encoder_forward({feats}, m.encoder, Mode::kEval, rngs).hidden;
}

}  // namespace

TEST_CASE("decoder causality: later tokens cannot move earlier logits") {
  Model m = [&]() {
    Rng init(1);
    return build_model(tiny_model_config(6), &init);
  }();
  Rng rng(2);
  Tensor feats = random_tensor(rng, {12, 8}, 1.0, false);
  PackedRows h = encode(m, feats);

  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  std::vector<int> prefix = {kSosId, 3, 4, 5};
  PackedRows l1 = decoder_forward({prefix}, h, m.decoder, Mode::kEval, rngs);
  std::vector<int> altered = {kSosId, 3, 5, 5};  // change position 2
  PackedRows l2 = decoder_forward({altered}, h, m.decoder, Mode::kEval, rngs);

  const auto v = m.decoder.cfg.vocab;
  for (std::int64_t s = 0; s < 2; ++s) {  // rows before the change
    for (std::int64_t j = 0; j < v; ++j) {
      CHECK(l1.x.values()[s * v + j] == l2.x.values()[s * v + j]);
    }
  }
  double moved = 0.0;
  for (std::int64_t j = 0; j < v; ++j) {
    moved = std::max(moved, std::abs(l1.x.values()[2 * v + j] - l2.x.values()[2 * v + j]));
  }
  CHECK(moved > 0.0);
}

TEST_CASE("decoder output distributions normalize and see the encoder") {
  Model m = [&]() {
    Rng init(3);
    return build_model(tiny_model_config(5), &init);
  }();
  Rng rng(4);
  Tensor feats = random_tensor(rng, {10, 8}, 1.0, false);
  PackedRows h = encode(m, feats);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  PackedRows logits = decoder_forward({{kSosId}}, h, m.decoder, Mode::kEval, rngs);
  Tensor probs = softmax(logits.x);
  double acc = 0.0;
  for (auto p : probs.values()) acc += p;
  CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));

  // Cross-attention is wired: perturbing h changes the logits.
  std::vector<double> hv(h.x.values().begin(), h.x.values().end());
  hv[0] += 1.0;
  PackedRows hp{Tensor::from_data(h.x.shape(), std::move(hv)), h.lens};
  PackedRows logits2 = decoder_forward({{kSosId}}, hp, m.decoder, Mode::kEval, rngs);
  CHECK(max_abs_diff(logits.x, logits2.x) > 0.0);
}

TEST_CASE("nll_loss: uniform, near-perfect and hand-computed cases") {
  const int v = 7;
  Tensor uniform = Tensor::zeros({3, v});
  Tensor lu = nll_loss(uniform, {3, 4, 5}, Mask(3, 1));
  CHECK(lu.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-9));

  std::vector<double> sharp(2 * v, 0.0);
  sharp[0 * v + 3] = 50.0;
  sharp[1 * v + 2] = 50.0;
  Tensor ls = nll_loss(Tensor::from_data({2, v}, std::move(sharp)), {3, 2}, Mask(2, 1));
  CHECK(ls.item() < 1e-6);

  // B = 1, S = 2, V = 3 hand computation.
  Tensor logits = Tensor::from_data({2, 3}, {0.5, -0.25, 1.0, 2.0, 0.0, -1.0});
  std::vector<int> targets = {2, 0};
  double expect = 0.0;
  {
    auto lv = logits.values();
    for (int s = 0; s < 2; ++s) {
      double denom = 0.0;
      for (int j = 0; j < 3; ++j) denom += std::exp(lv[s * 3 + j]);
      expect -= lv[s * 3 + targets[s]] - std::log(denom);
    }
    expect /= 2.0;
  }
  Tensor lh = nll_loss(logits, targets, Mask(2, 1));
  CHECK(lh.item() == doctest::Approx(expect).epsilon(1e-9));

  CHECK_THROWS_AS(nll_loss(logits, targets, Mask(2, 0)), UsageError);
}

TEST_CASE("nll_loss mask excludes padded target positions") {
  Rng rng(77);
  Tensor logits = random_tensor(rng, {5, 4}, 1.0, false);
  std::vector<int> targets = {1, 3, 2, 0, 0};  // last two are padding
  Mask valid = {1, 1, 1, 0, 0};
  Tensor masked = nll_loss(logits, targets, valid);

  Tensor sliced = row_slice(logits, 0, 3);
  Tensor plain = nll_loss(sliced, {1, 3, 2}, Mask(3, 1));
  CHECK(masked.item() == doctest::Approx(plain.item()).epsilon(1e-12));
}

TEST_CASE("nll_loss gradient through log-softmax") {
  Rng rng(5);
  Tensor logits = random_tensor(rng, {4, 5});
  auto loss = [&]() { return nll_loss(logits, {1, 0, 4, 2}, Mask(4, 1)); };
  CHECK(finite_diff_check(loss, {logits}).ok);
}

TEST_CASE("kd_loss: zero at equality, one on unit rows, formula oracle") {
  Rng rng(6);
  Tensor h = random_tensor(rng, {5, 4}, 1.0, false);
  CHECK(kd_loss(h, h).item() == 0.0);

  std::vector<double> shifted(h.values().begin(), h.values().end());
  for (std::int64_t i = 0; i < 5; ++i) shifted[i * 4] += 1.0;  // unit offset per row
  Tensor hp = Tensor::from_data({5, 4}, std::move(shifted));
  CHECK(kd_loss(h, hp).item() == doctest::Approx(1.0).epsilon(1e-12));

  Tensor a = random_tensor(rng, {3, 4}, 1.0, false);
  Tensor b = random_tensor(rng, {3, 4}, 1.0, false);
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    double acc = 0.0;
    for (int j = 0; j < 4; ++j) {
      const double d = a.values()[i * 4 + j] - b.values()[i * 4 + j];
      acc += d * d;
    }
    expect += std::sqrt(acc);
  }
  expect /= 3.0;
  CHECK(kd_loss(a, b).item() == doctest::Approx(expect).epsilon(1e-9));
  CHECK(kd_loss(a, b).item() >= 0.0);

  Tensor wrong = random_tensor(rng, {4, 4}, 1.0, false);
  CHECK_THROWS_AS(kd_loss(a, wrong), ShapeError);
}

TEST_CASE("total_loss arithmetic and linearity") {
  Tensor nll = Tensor::scalar(2.0);
  std::vector<Tensor> balance = {Tensor::scalar(1.0), Tensor::scalar(1.2)};
  LossWeights w;
  w.alpha = 0.01;
  w.beta = 0.005;
  Tensor kd = Tensor::scalar(0.5);
  CHECK(total_loss(nll, balance, kd, w).item() == doctest::Approx(2.0135).epsilon(1e-12));

  LossWeights zero;
  zero.alpha = 0.0;
  zero.beta = 0.0;
  CHECK(total_loss(nll, balance, kd, zero).item() == 2.0);

  // Uniform routing: every balance term is 1, contributing exactly alpha.
  std::vector<Tensor> ones = {Tensor::scalar(1.0), Tensor::scalar(1.0)};
  LossWeights only_alpha;
  only_alpha.alpha = 0.01;
  only_alpha.beta = 0.0;
  CHECK(total_loss(Tensor::scalar(0.0), ones, std::nullopt, only_alpha).item() ==
        doctest::Approx(0.01).epsilon(1e-15));

  // Linear in each component: evaluate at weight 0 and 1.
  LossWeights unit;
  unit.alpha = 1.0;
  unit.beta = 1.0;
  const double at_unit = total_loss(nll, balance, kd, unit).item();
  CHECK(at_unit == doctest::Approx(2.0 + 1.1 + 0.5).epsilon(1e-12));
}

TEST_CASE("beam search: beam=1 equals greedy decoding") {
  Model m = [&]() {
    Rng init(7);
    return build_model(tiny_model_config(5), &init);
  }();
  Rng rng(8);
  Tensor feats = random_tensor(rng, {10, 8}, 1.0, false);

  Hypothesis beam1 = beam_search(feats, m, 1, 4);

  // Greedy reference: argmax step by step.
  PackedRows h = encode(m, feats);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  std::vector<int> greedy;
  std::vector<int> prefix = {kSosId};
  for (int step = 0; step < 4; ++step) {
    PackedRows logits = decoder_forward({prefix}, h, m.decoder, Mode::kEval, rngs);
    const auto v = m.decoder.cfg.vocab;
    const auto last = logits.x.dim(0) - 1;
    int best = -1;
    double best_v = -1e300;
    for (int tok = 0; tok < v; ++tok) {
      if (tok == kPadId || tok == kSosId) continue;
      const double lv = logits.x.values()[last * v + tok];
      if (lv > best_v) {
        best_v = lv;
        best = tok;
      }
    }
    if (best == kEosId) break;
    greedy.push_back(best);
    prefix.push_back(best);
  }
  CHECK(beam1.tokens == greedy);
}

TEST_CASE("beam covering every hypothesis matches exhaustive enumeration") {
  const int v = 4, max_len = 3;
  Model m = [&]() {
    Rng init(9);
    return build_model(tiny_model_config(v), &init);
  }();
  Rng rng(10);
  Tensor feats = random_tensor(rng, {9, 8}, 1.0, false);
  PackedRows h = encode(m, feats);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);

  // Enumerate every sequence over {eos, content...} up to max_len, scored by
  // length-normalized total log probability exactly like the search.
  struct Best {
    std::vector<int> tokens;
    double score = -1e300;
  } best;
  auto logprob_row = [&](const std::vector<int>& prefix) {
    PackedRows logits = decoder_forward({prefix}, h, m.decoder, Mode::kEval, rngs);
    Tensor last = log_softmax(row_slice(logits.x, logits.x.dim(0) - 1, logits.x.dim(0)));
    return std::vector<double>(last.values().begin(), last.values().end());
  };
  std::function<void(std::vector<int>&, double)> enumerate =
      [&](std::vector<int>& tokens, double logp) {
        std::vector<int> prefix = {kSosId};
        prefix.insert(prefix.end(), tokens.begin(), tokens.end());
        auto row = logprob_row(prefix);
        for (int tok = 0; tok < v; ++tok) {
          if (tok == kPadId || tok == kSosId) continue;
          const double lp = logp + row[tok];
          const int len = static_cast<int>(tokens.size()) + 1;
          if (tok == kEosId || len == max_len) {
            std::vector<int> full = tokens;
            if (tok != kEosId) full.push_back(tok);
            const double score = lp / len;
            if (score > best.score) best = Best{full, score};
          } else {
            tokens.push_back(tok);
            enumerate(tokens, lp);
            tokens.pop_back();
          }
        }
      };
  std::vector<int> empty;
  enumerate(empty, 0.0);

  const int full_beam = v * v * v;  // covers every candidate at every step
  Hypothesis hyp = beam_search(feats, m, full_beam, max_len);
  CHECK(hyp.tokens == best.tokens);
  CHECK(hyp.score == doctest::Approx(best.score).epsilon(1e-9));

  // Widening the beam can only match or beat greedy's normalized score.
  Hypothesis greedy = beam_search(feats, m, 1, max_len);
  CHECK(hyp.score >= greedy.score - 1e-12);
  Hypothesis beam4 = beam_search(feats, m, 4, max_len);
  CHECK(beam4.score >= greedy.score - 1e-12);

  // Deterministic across repeated calls.
  Hypothesis again = beam_search(feats, m, full_beam, max_len);
  CHECK(again.tokens == hyp.tokens);
  CHECK(again.score == hyp.score);

  CHECK_THROWS_AS(beam_search(feats, m, 2, 0), UsageError);
}

TEST_CASE("end-to-end gradient on a tiny model with pinned routing") {
  // d=8, C=1, G=2, E=2, V=5, T=12 with dropout and gate noise off.
  ModelConfig cfg = tiny_model_config(5, 1, 2, 2);
  Rng init(20);
  Model m = build_model(cfg, &init);

  Rng rng(21);
  Tensor feats = random_tensor(rng, {12, cfg.encoder.feature_dim}, 1.0, false);
  const std::vector<int> tokens = {3, 4, 3};

  // Freeze the routing of the unperturbed point.
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  EncoderResult base = encoder_forward({feats}, m.encoder, Mode::kEval, rngs);
  PinnedRouting pinned{base.routing_by_application};

  LossWeights w;
  w.alpha = 0.01;
  w.beta = 0.0;
  auto loss = [&]() {
    StepRngs r = StepRngs::for_step(Rng(0), 0);
    EncoderResult enc = encoder_forward({feats}, m.encoder, Mode::kTrain, r, false, &pinned);
    std::vector<int> prefix = {kSosId, 3, 4, 3};
    std::vector<int> targets = {3, 4, 3, kEosId};
    PackedRows logits = decoder_forward({prefix}, enc.hidden, m.decoder, Mode::kTrain, r);
    Tensor nll = nll_loss(logits.x, targets, Mask(4, 1));
    RouterStats pooled = RouterStats::pooled(enc.stats[0][0], enc.stats[0][1]);
    std::vector<Tensor> balance = {load_balance_loss(pooled)};
    return total_loss(nll, balance, std::nullopt, w);
  };

  std::vector<Tensor> params = m.registry.trainable();
  // Check every parameter of the model.
  auto res = finite_diff_check(loss, params, 1e-5, 1e-4, 1e-7);
  CHECK(res.ok);
  CHECK(res.max_rel_err < 1e-4);
}
