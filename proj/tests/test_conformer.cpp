#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "smc/conformer.hpp"
#include "testutil.hpp"

using namespace smc;
using smc::testing::max_abs_diff;
using smc::testing::random_tensor;

namespace {

EncoderConfig tiny_config(int c, int g, int e) {
  EncoderConfig cfg;
  cfg.blocks_per_group = c;
  cfg.groups = g;
  cfg.experts = e;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.kernel = 3;
  cfg.d_ff = 16;
  cfg.feature_dim = 8;
  cfg.frontend_channels = 2;
  cfg.dropout = 0.0;
  cfg.noise_std = 0.0;
  return cfg;
}

void copy_values(const Tensor& src, Tensor dst) {
  REQUIRE(src.shape() == dst.shape());
  auto s = src.values();
  auto d = dst.mutable_values();
  for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i];
}

/// Physically unroll a (C, G) shared encoder into a (C*G, 1) copy.
void unroll_into(const ParamRegistry& shared, const EncoderConfig& cfg,
                 ParamRegistry& unrolled) {
  auto copy_prefix = [&](const std::string& from, const std::string& to) {
    for (const auto& item : shared.items()) {
      if (item.name.rfind(from, 0) == 0) {
        const std::string dst_name = to + item.name.substr(from.size());
        copy_values(item.tensor, unrolled.find(dst_name));
      }
    }
  };
  copy_prefix("frontend", "frontend");
  for (int g = 0; g < cfg.groups; ++g) {
    for (int c = 0; c < cfg.blocks_per_group; ++c) {
      const int j = g * cfg.blocks_per_group + c;
      const std::string src = "enc.c" + std::to_string(c);
      const std::string dst = "enc.c" + std::to_string(j);
      // Shared weights of position c feed every group's copy.
      for (const char* part : {".ffn1", ".mhsa", ".conv", ".expert"}) {
        copy_prefix(src + part, dst + part);
      }
      copy_prefix(src + ".g" + std::to_string(g), dst + ".g0");
    }
  }
}

std::vector<double> grad_of(const Tensor& t) {
  auto g = t.grad();
  if (g.empty()) return std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
  return std::vector<double>(g.begin(), g.end());
}

}  // namespace

TEST_CASE("block with null sublayers reduces to the final layer norm") {
  EncoderConfig cfg = tiny_config(1, 1, 2);
  ParamRegistry reg;
  EncoderParams enc = build_encoder(cfg, reg, nullptr);  // all-zero weights

  Rng rng(1);
  const int t = 5;
  Tensor z = random_tensor(rng, {t, cfg.d}, 1.0, false);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  BlockResult br = conformer_block_forward(PackedRows{z, {t}}, enc.blocks[0],
                                           *enc.norms[0][0], *enc.routers[0][0], 0.0,
                                           Mode::kEval, rngs, Mask(t, 1));
  Tensor expect = layer_norm(z, enc.norms[0][0]->ln_final);
  CHECK(max_abs_diff(br.out, expect) < 1e-12);
}

TEST_CASE("half-step factor sits outside the first FFN") {
  EncoderConfig cfg = tiny_config(1, 1, 1);
  ParamRegistry reg;
  Rng init(3);
  EncoderParams enc = build_encoder(cfg, reg, &init);

  Rng rng(2);
  const int t = 4;
  Tensor z = random_tensor(rng, {t, cfg.d}, 1.0, false);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  const Mask mask(t, 1);

  auto first_residual = [&]() {
    Tensor r1 = ffn_forward(layer_norm(z, enc.norms[0][0]->ln_ffn1), enc.blocks[0].ffn1);
    Tensor z1 = add(z, scale(r1, 0.5));
    return sub(z1, z);
  };
  Tensor base = first_residual();
  // Double W2 and b2 of the first FFN: the half-step residual must double.
  for (Tensor t2 : {enc.blocks[0].ffn1.w2, enc.blocks[0].ffn1.b2}) {
    auto v = t2.mutable_values();
    for (auto& x : v) x *= 2.0;
  }
  Tensor doubled = first_residual();
  for (std::size_t i = 0; i < base.values().size(); ++i) {
    CHECK(doubled.values()[i] == doctest::Approx(2.0 * base.values()[i]).epsilon(1e-9));
  }
}

TEST_CASE("composed block equals manual chaining of the four sublayers") {
  EncoderConfig cfg = tiny_config(1, 1, 2);
  ParamRegistry reg;
  Rng init(5);
  EncoderParams enc = build_encoder(cfg, reg, &init);
  BlockNorms& n = *enc.norms[0][0];
  const RouterParams& router = *enc.routers[0][0];
  const BlockWeights& w = enc.blocks[0];

  Rng rng(6);
  const int t = 6;
  Tensor z = random_tensor(rng, {t, cfg.d}, 1.0, false);
  const Mask mask(t, 1);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  BlockResult br = conformer_block_forward(PackedRows{z, {t}}, w, n, router, 0.0,
                                           Mode::kEval, rngs, mask);

  Rng nrng(0);
  Tensor z1 = add(z, scale(ffn_forward(layer_norm(z, n.ln_ffn1), w.ffn1), 0.5));
  Tensor z2 = add(z1, rel_mhsa(PackedRows{layer_norm(z1, n.ln_mhsa), {t}}, w.mhsa, mask));
  Tensor z3 = add(z2, conv_module(PackedRows{layer_norm(z2, n.ln_conv), {t}}, w.conv,
                                  n.bn, Mode::kEval, mask));
  auto moe = moe_ffn_forward(layer_norm(z3, n.ln_moe), w.experts, router, Mode::kEval,
                             nrng, mask);
  Tensor zhat = layer_norm(add(z3, scale(moe.out, 0.5)), n.ln_final);
  CHECK(max_abs_diff(br.out, zhat) < 1e-6);
}

TEST_CASE("encoder with C=1, G=1 equals frontend plus a single block") {
  EncoderConfig cfg = tiny_config(1, 1, 2);
  ParamRegistry reg;
  Rng init(7);
  EncoderParams enc = build_encoder(cfg, reg, &init);

  Rng rng(8);
  Tensor feats = random_tensor(rng, {14, cfg.feature_dim}, 1.0, false);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  EncoderResult res = encoder_forward({feats}, enc, Mode::kEval, rngs);

  Tensor h = subsample_frontend(feats, enc.frontend);
  const auto t = h.dim(0);
  StepRngs rngs2 = StepRngs::for_step(Rng(0), 0);
  BlockResult br = conformer_block_forward(PackedRows{h, {t}}, enc.blocks[0],
                                           *enc.norms[0][0], *enc.routers[0][0],
                                           cfg.dropout, Mode::kEval, rngs2, Mask(t, 1));
  CHECK(max_abs_diff(res.hidden.x, br.out) < 1e-12);
}

TEST_CASE("perturbation probes: shared weights touch all groups, routers stay local") {
  EncoderConfig cfg = tiny_config(2, 3, 2);
  ParamRegistry reg;
  Rng init(9);
  EncoderParams enc = build_encoder(cfg, reg, &init);

  Rng rng(10);
  Tensor feats = random_tensor(rng, {18, cfg.feature_dim}, 1.0, false);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  EncoderResult base = encoder_forward({feats}, enc, Mode::kEval, rngs, true);

  // Perturb a shared FFN weight at position 0: the ffn distance row of every
  // group's application of that position must change.
  {
    Tensor w = enc.blocks[0].ffn1.w1;
    auto v = w.mutable_values();
    const double saved = v[0];
    v[0] += 0.5;
    EncoderResult pert = encoder_forward({feats}, enc, Mode::kEval, rngs, true);
    v[0] = saved;
    for (int g = 0; g < cfg.groups; ++g) {
      const int app = g * cfg.blocks_per_group;  // position c = 0 in group g
      CHECK(std::abs(base.profile[4 * app].distance - pert.profile[4 * app].distance) >
            0.0);
    }
  }

  // Perturb the router of (c=0, g=2): routing of applications in other
  // groups must be bit-identical on the same input.
  {
    Tensor rw = enc.routers[0][2]->w;
    auto v = rw.mutable_values();
    const double saved = v[0];
    v[0] += 2.0;
    EncoderResult pert = encoder_forward({feats}, enc, Mode::kEval, rngs);
    v[0] = saved;
    for (int g = 0; g < cfg.groups; ++g) {
      for (int c = 0; c < cfg.blocks_per_group; ++c) {
        const int app = g * cfg.blocks_per_group + c;
        if (g == 2) continue;
        CHECK(base.routing_by_application[app] == pert.routing_by_application[app]);
      }
    }
  }
}

TEST_CASE("shared (C=2, G=3) forward equals the physically unrolled copy") {
  EncoderConfig cfg = tiny_config(2, 3, 2);
  ParamRegistry sreg;
  Rng init(11);
  EncoderParams shared = build_encoder(cfg, sreg, &init);

  EncoderConfig ucfg = cfg;
  ucfg.blocks_per_group = cfg.blocks_per_group * cfg.groups;
  ucfg.groups = 1;
  ParamRegistry ureg;
  EncoderParams unrolled = build_encoder(ucfg, ureg, nullptr);
  unroll_into(sreg, cfg, ureg);

  Rng rng(12);
  Tensor feats = random_tensor(rng, {20, cfg.feature_dim}, 1.0, false);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  EncoderResult a = encoder_forward({feats}, shared, Mode::kEval, rngs);
  EncoderResult b = encoder_forward({feats}, unrolled, Mode::kEval, rngs);
  CHECK(max_abs_diff(a.hidden.x, b.hidden.x) < 1e-6);

  // Gradients: d loss / d shared weight equals the sum over group copies.
  auto run_backward = [&](EncoderParams& enc) {
    for (const auto& item : (&enc == &shared ? sreg : ureg).items()) {
      Tensor t = item.tensor;
      t.zero_grad();
    }
    Tape tape;
    TapeScope scope(tape);
    StepRngs r2 = StepRngs::for_step(Rng(0), 0);
    EncoderResult res = encoder_forward({feats}, enc, Mode::kEval, r2);
    tape.backward(sum_all(mul(res.hidden.x, res.hidden.x)));
  };
  run_backward(shared);
  run_backward(unrolled);

  for (int c = 0; c < cfg.blocks_per_group; ++c) {
    const std::string name = "enc.c" + std::to_string(c) + ".ffn1.w1";
    auto sg = grad_of(sreg.find(name));
    std::vector<double> sum(sg.size(), 0.0);
    for (int g = 0; g < cfg.groups; ++g) {
      const int j = g * cfg.blocks_per_group + c;
      auto ug = grad_of(ureg.find("enc.c" + std::to_string(j) + ".ffn1.w1"));
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += ug[i];
    }
    for (std::size_t i = 0; i < sum.size(); ++i) {
      const double denom = std::max({1.0, std::abs(sg[i]), std::abs(sum[i])});
      CHECK(std::abs(sg[i] - sum[i]) / denom < 1e-5);
    }
  }
}

TEST_CASE("eval forward of a batch equals the per-utterance forwards") {
  // Batch packing must not couple utterances outside train-mode batch
  // statistics: in eval mode every op is segment-local or pointwise.
  EncoderConfig cfg = tiny_config(2, 2, 2);
  ParamRegistry reg;
  Rng init(41);
  EncoderParams enc = build_encoder(cfg, reg, &init);

  Rng rng(42);
  Tensor a = random_tensor(rng, {15, cfg.feature_dim}, 1.0, false);
  Tensor b = random_tensor(rng, {22, cfg.feature_dim}, 1.0, false);
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);
  EncoderResult joint = encoder_forward({a, b}, enc, Mode::kEval, rngs);
  EncoderResult only_a = encoder_forward({a}, enc, Mode::kEval, rngs);
  EncoderResult only_b = encoder_forward({b}, enc, Mode::kEval, rngs);

  const auto ta = only_a.hidden.x.dim(0);
  const auto d = cfg.d;
  for (std::int64_t i = 0; i < ta * d; ++i) {
    CHECK(joint.hidden.x.values()[i] == only_a.hidden.x.values()[i]);
  }
  for (std::int64_t i = 0; i < only_b.hidden.x.numel(); ++i) {
    CHECK(joint.hidden.x.values()[ta * d + i] == only_b.hidden.x.values()[i]);
  }
}

TEST_CASE("parameter accounting reproduces the reference encoder sizes") {
  EncoderConfig reference;
  reference.d = 256;
  reference.heads = 4;
  reference.kernel = 15;
  reference.d_ff = 1024;
  reference.feature_dim = 80;
  reference.frontend_channels = 32;

  auto npe = [&](int c, int g, int e, bool share) {
    EncoderConfig cfg = reference;
    cfg.blocks_per_group = c;
    cfg.groups = g;
    cfg.experts = e;
    cfg.share_norms = share;
    cfg.share_routers = share;
    return count_params(cfg);
  };

  auto within = [](std::int64_t got, double want_m, double tol) {
    return std::abs(static_cast<double>(got) / 1e6 - want_m) <= tol * want_m;
  };

  ParamReport c12 = npe(12, 1, 1, false);
  CHECK(within(c12.total(), 21.58, 0.05));
  CHECK(c12.total() == c12.frontend + c12.ffn + c12.mhsa + c12.conv + c12.experts +
                           c12.routers + c12.norms);
  CHECK(within(npe(2, 1, 1, false).total(), 3.74, 0.05));
  CHECK(within(npe(1, 1, 1, false).total(), 1.95, 0.05));
  CHECK(within(npe(1, 1, 4, false).total(), 3.53, 0.05));
  CHECK(within(npe(1, 12, 4, false).total(), 3.59, 0.05));
  CHECK(within(npe(2, 1, 4, false).total(), 6.89, 0.05));
  CHECK(within(npe(2, 6, 4, false).total(), 6.95, 0.05));

  // Sharing makes group count free except for norms and routers.
  CHECK(npe(1, 12, 4, true).total() == npe(1, 1, 4, false).total());

  // Unrolling C blocks x G groups into C*G distinct blocks costs exactly
  // (G-1)*C copies of the shared fields; norms and routers already exist
  // per (position, group) in both.
  ParamReport shared_rep = npe(2, 6, 4, false);
  ParamReport unrolled_rep = npe(12, 1, 4, false);
  CHECK(unrolled_rep.norms == shared_rep.norms);
  CHECK(unrolled_rep.routers == shared_rep.routers);
  const auto shared_per_position =
      (shared_rep.ffn + shared_rep.mhsa + shared_rep.conv + shared_rep.experts) / 2;
  CHECK(unrolled_rep.total() - shared_rep.total() == 5 * 2 * shared_per_position);
  CHECK(unrolled_rep.total() >= shared_rep.total());

  // The report renders both ways.
  ParamReport rep = npe(1, 1, 4, false);
  CHECK(rep.table().find("total") != std::string::npos);
  CHECK(rep.key_values().find("experts=") != std::string::npos);
}

TEST_CASE("distinct model instances run concurrently on separate threads") {
  EncoderConfig cfg = tiny_config(1, 2, 2);
  ParamRegistry r1, r2;
  Rng i1(51), i2(52);
  EncoderParams e1 = build_encoder(cfg, r1, &i1);
  EncoderParams e2 = build_encoder(cfg, r2, &i2);

  Rng rng(53);
  Tensor f1 = random_tensor(rng, {16, cfg.feature_dim}, 1.0, false);
  Tensor f2 = random_tensor(rng, {20, cfg.feature_dim}, 1.0, false);

  auto run = [](EncoderParams& enc, const Tensor& feats) {
    StepRngs rngs = StepRngs::for_step(Rng(0), 0);
    Tape tape;
    TapeScope scope(tape);
    EncoderResult res = encoder_forward({feats}, enc, Mode::kEval, rngs);
    tape.backward(sum_all(mul(res.hidden.x, res.hidden.x)));
    return res.hidden.x.detach();
  };

  Tensor serial1 = run(e1, f1);
  Tensor serial2 = run(e2, f2);
  for (const auto& item : r1.items()) {
    Tensor t = item.tensor;
    t.zero_grad();
  }
  for (const auto& item : r2.items()) {
    Tensor t = item.tensor;
    t.zero_grad();
  }

  Tensor conc1, conc2;
  std::thread w1([&] { conc1 = run(e1, f1); });
  std::thread w2([&] { conc2 = run(e2, f2); });
  w1.join();
  w2.join();
  CHECK(max_abs_diff(serial1, conc1) == 0.0);
  CHECK(max_abs_diff(serial2, conc2) == 0.0);
}

TEST_CASE("l2 profile: row count, null network, determinism") {
  EncoderConfig cfg = tiny_config(2, 3, 2);
  ParamRegistry reg;
  Rng init(13);
  EncoderParams enc = build_encoder(cfg, reg, &init);

  Rng rng(14);
  Tensor feats = random_tensor(rng, {16, cfg.feature_dim}, 1.0, false);
  auto rows = l2_distance_profile(feats, enc);
  CHECK(rows.size() == static_cast<std::size_t>(4 * 2 * 3));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].index == static_cast<int>(i));
  }
  // Execution order: group-major, then block, then the four transformations.
  CHECK(rows[0].group == 0);
  CHECK(rows[0].block == 0);
  CHECK(rows[0].transformation == "ffn");
  CHECK(rows[4].block == 1);
  CHECK(rows[8].group == 1);

  auto rows2 = l2_distance_profile(feats, enc);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].distance == rows2[i].distance);
  }

  // Null sublayer weights: every residual contribution is zero.
  ParamRegistry zreg;
  EncoderParams zero = build_encoder(tiny_config(1, 2, 1), zreg, nullptr);
  auto zrows = l2_distance_profile(feats, zero);
  for (const auto& r : zrows) CHECK(r.distance == 0.0);
}
