#include "smc/conformer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace smc {

namespace {

const char* kTransformNames[4] = {"ffn", "mhsa", "conv", "moe"};

/// Mean over rows of the Euclidean distance between matching rows.
double branch_distance(const Tensor& before, const Tensor& after) {
  const auto rows = before.dim(0), cols = before.dim(1);
  auto a = before.values();
  auto b = after.values();
  double total = 0.0;
  for (std::int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      const double d = b[i * cols + j] - a[i * cols + j];
      acc += d * d;
    }
    total += std::sqrt(acc);
  }
  return total / static_cast<double>(rows);
}

}  // namespace

void EncoderConfig::validate() const {
  if (blocks_per_group < 1 || groups < 1 || experts < 1) {
    throw UsageError("encoder config: C, G and E must all be >= 1");
  }
  if (d < 1 || heads < 1 || d % heads != 0) {
    throw UsageError("encoder config: d must be positive and divisible by heads");
  }
  if (kernel < 1 || kernel % 2 == 0) {
    throw UsageError("encoder config: convolution kernel must be odd");
  }
  if (d_ff < 1 || feature_dim < 7 || frontend_channels < 1) {
    throw UsageError("encoder config: invalid dimensions (feature_dim must be >= 7)");
  }
  if (dropout < 0.0 || dropout >= 1.0 || noise_std < 0.0) {
    throw UsageError("encoder config: invalid dropout or noise parameters");
  }
}

StepRngs StepRngs::for_step(const Rng& base, std::uint64_t step) {
  return StepRngs{base.stream("dropout", step), base.stream("noise", step)};
}

BlockResult conformer_block_forward(const PackedRows& z, const BlockWeights& w,
                                    BlockNorms& norms, const RouterParams& router,
                                    double dropout_rate, Mode mode, StepRngs& rngs,
                                    const Mask& mask,
                                    const std::vector<std::int64_t>* pinned,
                                    double* profile4) {
  // z1 = z + 1/2 FFN(norm(z))
  Tensor r1 = ffn_forward(layer_norm(z.x, norms.ln_ffn1), w.ffn1);
  Tensor z1 = add(z.x, scale(dropout(r1, dropout_rate, mode, rngs.dropout), 0.5));

  // z2 = z1 + MHSA(norm(z1))
  Tensor r2 = rel_mhsa(PackedRows{layer_norm(z1, norms.ln_mhsa), z.lens}, w.mhsa, mask);
  Tensor z2 = add(z1, dropout(r2, dropout_rate, mode, rngs.dropout));

  // z3 = z2 + Conv(norm(z2))
  Tensor r3 = conv_module(PackedRows{layer_norm(z2, norms.ln_conv), z.lens}, w.conv,
                          norms.bn, mode, mask);
  Tensor z3 = add(z2, dropout(r3, dropout_rate, mode, rngs.dropout));

  // zhat = LayerNorm(z3 + 1/2 FFN_MoE(norm(z3)))
  MoeOutput moe = moe_ffn_forward(layer_norm(z3, norms.ln_moe), w.experts, router, mode,
                                  rngs.noise, mask, pinned);
  Tensor z4 = add(z3, scale(dropout(moe.out, dropout_rate, mode, rngs.dropout), 0.5));
  Tensor zhat = layer_norm(z4, norms.ln_final);

  if (profile4 != nullptr) {
    // Distance of each residual branch's contribution; the final layer norm
    // is not a branch, so the MoE distance is taken before it.
    profile4[0] = branch_distance(z.x, z1);
    profile4[1] = branch_distance(z1, z2);
    profile4[2] = branch_distance(z2, z3);
    profile4[3] = branch_distance(z3, z4);
  }
  return BlockResult{zhat, std::move(moe.stats), std::move(moe.decision)};
}

EncoderResult encoder_forward(const std::vector<Tensor>& features, EncoderParams& params,
                              Mode mode, StepRngs& rngs, bool collect_profile,
                              const PinnedRouting* pinned) {
  const auto& cfg = params.cfg;
  if (features.empty()) throw UsageError("encoder_forward: empty batch");

  std::vector<Tensor> fronted;
  std::vector<std::int64_t> lens;
  for (const auto& f : features) {
    Tensor h = subsample_frontend(f, params.frontend);
    lens.push_back(h.dim(0));
    fronted.push_back(std::move(h));
  }
  PackedRows z{fronted.size() == 1 ? fronted[0] : concat_rows(fronted), lens};
  const Mask mask(static_cast<std::size_t>(z.total_rows()), 1);

  EncoderResult res;
  res.stats.assign(cfg.blocks_per_group, std::vector<RouterStats>(cfg.groups));
  int app = 0;
  for (int g = 0; g < cfg.groups; ++g) {
    for (int c = 0; c < cfg.blocks_per_group; ++c) {
      double prof[4];
      const std::vector<std::int64_t>* pin =
          pinned != nullptr ? &pinned->per_application[app] : nullptr;
      BlockResult br = conformer_block_forward(
          z, params.blocks[c], *params.norms[c][g], *params.routers[c][g], cfg.dropout,
          mode, rngs, mask, pin, collect_profile ? prof : nullptr);
      if (collect_profile) {
        for (int s = 0; s < 4; ++s) {
          res.profile.push_back(L2ProfileRow{4 * app + s, g, c, kTransformNames[s], prof[s]});
        }
      }
      res.stats[c][g] = std::move(br.stats);
      res.routing_by_application.push_back(std::move(br.routing.chosen));
      z.x = br.out;
      ++app;
    }
  }
  res.hidden = std::move(z);
  return res;
}

std::vector<L2ProfileRow> l2_distance_profile(const Tensor& features,
                                              EncoderParams& params) {
  StepRngs rngs = StepRngs::for_step(Rng(0), 0);  // eval mode draws nothing
  EncoderResult res =
      encoder_forward({features}, params, Mode::kEval, rngs, /*collect_profile=*/true);
  return std::move(res.profile);
}

// ---- construction ---------------------------------------------------------

namespace {

FfnParams build_ffn(ParamBuilder& b, const std::string& p, int d, int d_ff,
                    ParamCategory cat) {
  FfnParams f;
  f.w1 = b.matrix(p + ".w1", d, d_ff, cat);
  f.b1 = b.zeros(p + ".b1", {d_ff}, cat);
  f.w2 = b.matrix(p + ".w2", d_ff, d, cat);
  f.b2 = b.zeros(p + ".b2", {d}, cat);
  return f;
}

MhsaParams build_mhsa(ParamBuilder& b, const std::string& p, int d, int heads) {
  MhsaParams m;
  m.heads = heads;
  m.wq = b.matrix(p + ".wq", d, d, ParamCategory::kMhsa);
  m.bq = b.zeros(p + ".bq", {d}, ParamCategory::kMhsa);
  m.wk = b.matrix(p + ".wk", d, d, ParamCategory::kMhsa);
  m.bk = b.zeros(p + ".bk", {d}, ParamCategory::kMhsa);
  m.wv = b.matrix(p + ".wv", d, d, ParamCategory::kMhsa);
  m.bv = b.zeros(p + ".bv", {d}, ParamCategory::kMhsa);
  m.wo = b.matrix(p + ".wo", d, d, ParamCategory::kMhsa);
  m.bo = b.zeros(p + ".bo", {d}, ParamCategory::kMhsa);
  m.wpos = b.matrix(p + ".wpos", d, d, ParamCategory::kMhsa);
  m.u = b.zeros(p + ".u", {d}, ParamCategory::kMhsa);
  m.v = b.zeros(p + ".v", {d}, ParamCategory::kMhsa);
  return m;
}

ConvModuleParams build_conv(ParamBuilder& b, const std::string& p, int d, int kernel) {
  ConvModuleParams c;
  c.pw1_w = b.matrix(p + ".pw1_w", d, 4 * d, ParamCategory::kConv);
  c.pw1_b = b.zeros(p + ".pw1_b", {4 * d}, ParamCategory::kConv);
  c.dw_w = b.tensor4(p + ".dw_w", {2 * d, kernel}, ParamCategory::kConv,
                     1.0 / std::sqrt(static_cast<double>(kernel)));
  c.dw_b = b.zeros(p + ".dw_b", {2 * d}, ParamCategory::kConv);
  c.pw2_w = b.matrix(p + ".pw2_w", 2 * d, d, ParamCategory::kConv);
  c.pw2_b = b.zeros(p + ".pw2_b", {d}, ParamCategory::kConv);
  return c;
}

NormParams build_norm(ParamBuilder& b, const std::string& p, int d, ParamCategory cat) {
  NormParams n;
  n.gamma = b.ones(p + ".gamma", {d}, cat);
  n.beta = b.zeros(p + ".beta", {d}, cat);
  return n;
}

std::shared_ptr<BlockNorms> build_block_norms(ParamBuilder& b, const std::string& p,
                                              int d) {
  auto n = std::make_shared<BlockNorms>();
  n->ln_ffn1 = build_norm(b, p + ".ln_ffn1", d, ParamCategory::kNorms);
  n->ln_mhsa = build_norm(b, p + ".ln_mhsa", d, ParamCategory::kNorms);
  n->ln_conv = build_norm(b, p + ".ln_conv", d, ParamCategory::kNorms);
  n->ln_moe = build_norm(b, p + ".ln_moe", d, ParamCategory::kNorms);
  n->ln_final = build_norm(b, p + ".ln_final", d, ParamCategory::kNorms);
  n->bn.gamma = b.ones(p + ".bn.gamma", {2 * d}, ParamCategory::kNorms);
  n->bn.beta = b.zeros(p + ".bn.beta", {2 * d}, ParamCategory::kNorms);
  n->bn.running_mean = b.state(p + ".bn.running_mean", {2 * d}, 0.0, ParamCategory::kNorms);
  n->bn.running_var = b.state(p + ".bn.running_var", {2 * d}, 1.0, ParamCategory::kNorms);
  return n;
}

std::shared_ptr<RouterParams> build_router(ParamBuilder& b, const std::string& p, int d,
                                           int experts, double noise_std) {
  auto r = std::make_shared<RouterParams>();
  r->w = b.matrix(p + ".w", d, experts, ParamCategory::kRouters);
  r->b = b.zeros(p + ".b", {experts}, ParamCategory::kRouters);
  r->noise_std = noise_std;
  return r;
}

}  // namespace

EncoderParams build_encoder(const EncoderConfig& cfg, ParamRegistry& reg, Rng* init_rng,
                            bool frozen, const std::string& prefix) {
  cfg.validate();
  ParamBuilder b(reg, init_rng, frozen);
  EncoderParams p;
  p.cfg = cfg;

  const int ch = cfg.frontend_channels;
  const auto f_out = subsampled_len(cfg.feature_dim);
  const std::string fp = prefix + "frontend";
  p.frontend.channels = ch;
  p.frontend.conv1_w = b.tensor4(fp + ".conv1.w", {ch, 1, 3, 3}, ParamCategory::kFrontend,
                                 1.0 / 3.0);
  p.frontend.conv1_b = b.zeros(fp + ".conv1.b", {ch}, ParamCategory::kFrontend);
  p.frontend.conv2_w = b.tensor4(fp + ".conv2.w", {ch, ch, 3, 3}, ParamCategory::kFrontend,
                                 1.0 / (3.0 * std::sqrt(static_cast<double>(ch))));
  p.frontend.conv2_b = b.zeros(fp + ".conv2.b", {ch}, ParamCategory::kFrontend);
  p.frontend.proj_w = b.matrix(fp + ".proj.w", ch * f_out, cfg.d, ParamCategory::kFrontend);
  p.frontend.proj_b = b.zeros(fp + ".proj.b", {cfg.d}, ParamCategory::kFrontend);

  for (int c = 0; c < cfg.blocks_per_group; ++c) {
    const std::string bp = prefix + "enc.c" + std::to_string(c);
    BlockWeights w;
    w.ffn1 = build_ffn(b, bp + ".ffn1", cfg.d, cfg.d_ff, ParamCategory::kFfn);
    w.mhsa = build_mhsa(b, bp + ".mhsa", cfg.d, cfg.heads);
    w.conv = build_conv(b, bp + ".conv", cfg.d, cfg.kernel);
    for (int e = 0; e < cfg.experts; ++e) {
      w.experts.experts.push_back(
          build_ffn(b, bp + ".expert" + std::to_string(e), cfg.d, cfg.d_ff,
                    ParamCategory::kExperts));
    }
    p.blocks.push_back(std::move(w));

    std::vector<std::shared_ptr<BlockNorms>> norms_g;
    std::vector<std::shared_ptr<RouterParams>> routers_g;
    for (int g = 0; g < cfg.groups; ++g) {
      const std::string gp = bp + ".g" + std::to_string(g);
      if (cfg.share_norms && g > 0) {
        norms_g.push_back(norms_g[0]);
      } else {
        norms_g.push_back(build_block_norms(b, gp, cfg.d));
      }
      if (cfg.share_routers && g > 0) {
        routers_g.push_back(routers_g[0]);
      } else {
        routers_g.push_back(
            build_router(b, gp + ".router", cfg.d, cfg.experts, cfg.noise_std));
      }
    }
    p.norms.push_back(std::move(norms_g));
    p.routers.push_back(std::move(routers_g));
  }
  return p;
}

// ---- accounting ------------------------------------------------------------

std::int64_t ParamReport::total() const {
  return frontend + ffn + mhsa + conv + experts + routers + norms;
}

std::string ParamReport::table() const {
  struct Row {
    const char* label;
    std::int64_t n;
  };
  const Row rows[] = {
      {"frontend", frontend}, {"ffn", ffn},         {"mhsa", mhsa},
      {"conv", conv},         {"experts", experts}, {"routers", routers},
      {"norms", norms},
  };
  std::ostringstream os;
  os << "category      parameters\n";
  os << "--------      ----------\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-12s %11lld\n", r.label,
                  static_cast<long long>(r.n));
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-12s %11lld  (%.2fM)\n", "total",
                static_cast<long long>(total()),
                static_cast<double>(total()) / 1e6);
  os << buf;
  return os.str();
}

std::string ParamReport::key_values() const {
  std::ostringstream os;
  os << "frontend=" << frontend << "\n"
     << "ffn=" << ffn << "\n"
     << "mhsa=" << mhsa << "\n"
     << "conv=" << conv << "\n"
     << "experts=" << experts << "\n"
     << "routers=" << routers << "\n"
     << "norms=" << norms << "\n"
     << "total=" << total() << "\n";
  return os.str();
}

ParamReport count_params(const EncoderConfig& cfg) {
  ParamRegistry reg;
  build_encoder(cfg, reg, /*init_rng=*/nullptr);
  ParamReport rep;
  for (const auto& item : reg.items()) {
    const auto n = item.tensor.numel();
    switch (item.category) {
      case ParamCategory::kFrontend: rep.frontend += n; break;
      case ParamCategory::kFfn: rep.ffn += n; break;
      case ParamCategory::kMhsa: rep.mhsa += n; break;
      case ParamCategory::kConv: rep.conv += n; break;
      case ParamCategory::kExperts: rep.experts += n; break;
      case ParamCategory::kRouters: rep.routers += n; break;
      case ParamCategory::kNorms: rep.norms += n; break;
      case ParamCategory::kDecoder: break;
    }
  }
  return rep;
}

}  // namespace smc
