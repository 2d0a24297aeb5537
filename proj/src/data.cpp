#include "smc/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "smc/seq2seq.hpp"

namespace smc {

namespace {

constexpr char kFeatureMagic[] = "smc-feats v1";

float to_le_float(float v) {
  // Little-endian storage; this build targets little-endian hosts.
  static_assert(sizeof(float) == 4);
  return v;
}

std::string utt_id(int i) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "utt%06d", i);
  return buf;
}

}  // namespace

Dataset synth_dataset(const SyntheticSpec& spec, int n_utts, std::uint64_t seed) {
  spec.validate();
  const int n_classes = spec.vocab - kFirstContentId;
  if (n_classes < 1) throw UsageError("synth_dataset: vocabulary has no content tokens");

  // Class patterns are fixed by the pattern seed, not the draw seed, so
  // different dataset splits share the same token acoustics.
  Rng pattern_rng = Rng(spec.pattern_seed).stream("patterns");
  std::vector<std::vector<float>> patterns(static_cast<std::size_t>(n_classes));
  for (auto& p : patterns) {
    p.resize(static_cast<std::size_t>(spec.feature_dim));
    for (auto& v : p) v = static_cast<float>(pattern_rng.next_gaussian());
  }

  Rng rng = Rng(seed).stream("synth");
  Dataset data;
  data.reserve(static_cast<std::size_t>(n_utts));
  for (int i = 0; i < n_utts; ++i) {
    Utterance utt;
    utt.id = utt_id(i);
    const int span = spec.max_tokens - spec.min_tokens + 1;
    const int n_tokens =
        spec.min_tokens + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(span)));
    utt.tokens.reserve(static_cast<std::size_t>(n_tokens));
    for (int t = 0; t < n_tokens; ++t) {
      utt.tokens.push_back(kFirstContentId +
                           static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_classes))));
    }
    utt.feature_dim = spec.feature_dim;
    utt.frames = static_cast<std::int64_t>(n_tokens) * spec.frames_per_token;
    utt.features.resize(static_cast<std::size_t>(utt.frames * spec.feature_dim));
    std::size_t off = 0;
    for (int t = 0; t < n_tokens; ++t) {
      const auto& pat = patterns[static_cast<std::size_t>(utt.tokens[t] - kFirstContentId)];
      for (int fr = 0; fr < spec.frames_per_token; ++fr) {
        for (int j = 0; j < spec.feature_dim; ++j) {
          float v = pat[static_cast<std::size_t>(j)];
          if (spec.noise_std > 0.0) {
            v += static_cast<float>(spec.noise_std * rng.next_gaussian());
          }
          utt.features[off++] = v;
        }
      }
    }
    data.push_back(std::move(utt));
  }
  return data;
}

void write_features(const std::string& path, const Dataset& data) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open feature file for writing: " + path);
  out << kFeatureMagic << "\n";
  for (const auto& utt : data) {
    out << "utt " << utt.id << " " << utt.frames << " " << utt.feature_dim << "\n";
    std::vector<float> le(utt.features.size());
    for (std::size_t i = 0; i < le.size(); ++i) le[i] = to_le_float(utt.features[i]);
    out.write(reinterpret_cast<const char*>(le.data()),
              static_cast<std::streamsize>(le.size() * sizeof(float)));
  }
  if (!out) throw UsageError("failed writing feature file: " + path);
}

Dataset read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open feature file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kFeatureMagic) {
    throw UsageError("feature file " + path + " has an unrecognized header");
  }
  Dataset data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream hs(line);
    std::string tag, id;
    std::int64_t frames = 0, dim = 0;
    hs >> tag >> id >> frames >> dim;
    if (tag != "utt" || id.empty() || frames < 0 || dim < 1) {
      throw UsageError("feature file " + path + ": malformed utterance header '" + line + "'");
    }
    Utterance utt;
    utt.id = id;
    utt.frames = frames;
    utt.feature_dim = dim;
    utt.features.resize(static_cast<std::size_t>(frames * dim));
    in.read(reinterpret_cast<char*>(utt.features.data()),
            static_cast<std::streamsize>(utt.features.size() * sizeof(float)));
    if (!in) throw UsageError("feature file " + path + ": truncated payload for " + id);
    data.push_back(std::move(utt));
  }
  return data;
}

void write_transcripts(const std::string& path, const Dataset& data) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open transcript file for writing: " + path);
  for (const auto& utt : data) {
    out << utt.id;
    for (int t : utt.tokens) out << " " << t;
    out << "\n";
  }
  if (!out) throw UsageError("failed writing transcript file: " + path);
}

void read_transcripts(const std::string& path, Dataset& data) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open transcript file: " + path);
  std::map<std::string, std::vector<int>> by_id;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    ls >> id;
    std::vector<int> tokens;
    int t;
    while (ls >> t) tokens.push_back(t);
    by_id[id] = std::move(tokens);
  }
  for (auto& utt : data) {
    auto it = by_id.find(utt.id);
    if (it == by_id.end()) {
      throw UsageError("transcript file " + path + " is missing utterance " + utt.id);
    }
    utt.tokens = it->second;
  }
}

Dataset load_dataset(const std::string& features_path, const std::string& transcripts_path) {
  Dataset data = read_features(features_path);
  read_transcripts(transcripts_path, data);
  return data;
}

Tensor features_tensor(const Utterance& utt) {
  std::vector<double> vals(utt.features.begin(), utt.features.end());
  return Tensor::from_data({utt.frames, utt.feature_dim}, std::move(vals));
}

std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, int batch_size,
                                                   Rng& order_rng) {
  if (batch_size < 1) throw UsageError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  // Length-sorted bucketing keeps batch members comparable in length.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return data[a].frames > data[b].frames;
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + i, order.begin() + end);
  }
  // Fisher-Yates over batch order.
  for (std::size_t i = batches.size(); i > 1; --i) {
    const auto j = order_rng.next_below(i);
    std::swap(batches[i - 1], batches[j]);
  }
  return batches;
}

std::int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::int64_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const std::int64_t subst = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, subst});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace smc
