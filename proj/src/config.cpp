#include "smc/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace smc {

void SyntheticSpec::validate() const {
  if (vocab < 4) {
    throw UsageError("synth config: vocab must be >= 4 (three reserved ids)");
  }
  if (frames_per_token < 4) {
    throw UsageError("synth config: frames_per_token must be >= 4 to survive subsampling");
  }
  if (feature_dim < 7 || n_utts < 1 || min_tokens < 1 || max_tokens < min_tokens) {
    throw UsageError("synth config: invalid dimensions");
  }
  if (noise_std < 0.0) throw UsageError("synth config: negative noise std");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

bool apply_model_key(ModelConfig& m, const std::string& key, const std::string& v) {
  EncoderConfig& e = m.encoder;
  DecoderConfig& d = m.decoder;
  if (key == "encoder.blocks_per_group") e.blocks_per_group = to_int(key, v);
  else if (key == "encoder.groups") e.groups = to_int(key, v);
  else if (key == "encoder.experts") e.experts = to_int(key, v);
  else if (key == "encoder.d") e.d = to_int(key, v);
  else if (key == "encoder.heads") e.heads = to_int(key, v);
  else if (key == "encoder.kernel") e.kernel = to_int(key, v);
  else if (key == "encoder.d_ff") e.d_ff = to_int(key, v);
  else if (key == "encoder.feature_dim") e.feature_dim = to_int(key, v);
  else if (key == "encoder.frontend_channels") e.frontend_channels = to_int(key, v);
  else if (key == "encoder.dropout") e.dropout = to_double(key, v);
  else if (key == "encoder.noise_std") e.noise_std = to_double(key, v);
  else if (key == "encoder.share_norms") e.share_norms = to_bool(key, v);
  else if (key == "encoder.share_routers") e.share_routers = to_bool(key, v);
  else if (key == "decoder.blocks") d.blocks = to_int(key, v);
  else if (key == "decoder.heads") d.heads = to_int(key, v);
  else if (key == "decoder.d_ff") d.d_ff = to_int(key, v);
  else if (key == "decoder.vocab") d.vocab = to_int(key, v);
  else if (key == "decoder.dropout") d.dropout = to_double(key, v);
  else return false;
  return true;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  bool vocab_set = false;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) +
                       ": expected 'section.key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key.empty() || v.empty()) {
      throw UsageError("config line " + std::to_string(line_no) + ": empty key or value");
    }

    if (apply_model_key(cfg.model, key, v)) {
      if (key == "decoder.vocab") vocab_set = true;
      continue;
    }
    if (key == "loss.alpha") cfg.loss.alpha = to_double(key, v);
    else if (key == "loss.beta") cfg.loss.beta = to_double(key, v);
    else if (key == "optimizer.lr_scale") cfg.optimizer.lr_scale = to_double(key, v);
    else if (key == "optimizer.warmup") cfg.optimizer.warmup = to_int(key, v);
    else if (key == "optimizer.beta1") cfg.optimizer.beta1 = to_double(key, v);
    else if (key == "optimizer.beta2") cfg.optimizer.beta2 = to_double(key, v);
    else if (key == "optimizer.epsilon") cfg.optimizer.epsilon = to_double(key, v);
    else if (key == "train.seed") cfg.train.seed = to_u64(key, v);
    else if (key == "train.epochs") cfg.train.epochs = to_int(key, v);
    else if (key == "train.batch_size") cfg.train.batch_size = to_int(key, v);
    else if (key == "train.save_every") cfg.train.save_every = to_int(key, v);
    else if (key == "train.out_dir") cfg.train.out_dir = v;
    else if (key == "train.init_checkpoint") cfg.train.init_checkpoint = v;
    else if (key == "train.teacher_checkpoint") cfg.train.teacher_checkpoint = v;
    else if (key == "data.train_features") cfg.data.train_features = v;
    else if (key == "data.train_transcripts") cfg.data.train_transcripts = v;
    else if (key == "data.eval_features") cfg.data.eval_features = v;
    else if (key == "data.eval_transcripts") cfg.data.eval_transcripts = v;
    else if (key == "synth.vocab") cfg.synth.vocab = to_int(key, v);
    else if (key == "synth.frames_per_token") cfg.synth.frames_per_token = to_int(key, v);
    else if (key == "synth.feature_dim") cfg.synth.feature_dim = to_int(key, v);
    else if (key == "synth.pattern_seed") cfg.synth.pattern_seed = to_u64(key, v);
    else if (key == "synth.noise_std") cfg.synth.noise_std = to_double(key, v);
    else if (key == "synth.n_utts") cfg.synth.n_utts = to_int(key, v);
    else if (key == "synth.min_tokens") cfg.synth.min_tokens = to_int(key, v);
    else if (key == "synth.max_tokens") cfg.synth.max_tokens = to_int(key, v);
    else if (key == "synth.out_features") cfg.synth.out_features = v;
    else if (key == "synth.out_transcripts") cfg.synth.out_transcripts = v;
    else {
      throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" +
                       key + "'");
    }
  }
  // The decoder dim always follows the encoder dim; vocab defaults to the
  // synthetic task's vocabulary when not given explicitly.
  cfg.model.decoder.d = cfg.model.encoder.d;
  if (!vocab_set) cfg.model.decoder.vocab = cfg.synth.vocab;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string model_config_text(const ModelConfig& cfg) {
  const EncoderConfig& e = cfg.encoder;
  const DecoderConfig& d = cfg.decoder;
  std::ostringstream os;
  os << "encoder.blocks_per_group = " << e.blocks_per_group << "\n"
     << "encoder.groups = " << e.groups << "\n"
     << "encoder.experts = " << e.experts << "\n"
     << "encoder.d = " << e.d << "\n"
     << "encoder.heads = " << e.heads << "\n"
     << "encoder.kernel = " << e.kernel << "\n"
     << "encoder.d_ff = " << e.d_ff << "\n"
     << "encoder.feature_dim = " << e.feature_dim << "\n"
     << "encoder.frontend_channels = " << e.frontend_channels << "\n"
     << "encoder.dropout = " << fmt_double(e.dropout) << "\n"
     << "encoder.noise_std = " << fmt_double(e.noise_std) << "\n"
     << "encoder.share_norms = " << (e.share_norms ? "true" : "false") << "\n"
     << "encoder.share_routers = " << (e.share_routers ? "true" : "false") << "\n"
     << "decoder.blocks = " << d.blocks << "\n"
     << "decoder.heads = " << d.heads << "\n"
     << "decoder.d_ff = " << d.d_ff << "\n"
     << "decoder.vocab = " << d.vocab << "\n"
     << "decoder.dropout = " << fmt_double(d.dropout) << "\n";
  return os.str();
}

ModelConfig parse_model_config(const std::string& text) {
  ModelConfig m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("model config: malformed line '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!apply_model_key(m, key, v)) {
      throw UsageError("model config: unknown key '" + key + "'");
    }
  }
  m.decoder.d = m.encoder.d;
  return m;
}

std::uint64_t text_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace smc
