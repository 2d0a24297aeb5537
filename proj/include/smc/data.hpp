#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smc/config.hpp"
#include "smc/tensor.hpp"

namespace smc {

struct Utterance {
  std::string id;
  std::int64_t frames = 0;
  std::int64_t feature_dim = 0;
  std::vector<float> features;  // frames x feature_dim, row major
  std::vector<int> tokens;      // content token ids (no <sos>/<eos>)
};

using Dataset = std::vector<Utterance>;

/// Each content token emits frames_per_token copies of its class pattern
/// (fixed by pattern_seed) plus i.i.d. Gaussian noise. Deterministic for a
/// given (spec, seed).
Dataset synth_dataset(const SyntheticSpec& spec, int n_utts, std::uint64_t seed);

/// Feature file: "smc-feats v1" header line, then per utterance a text line
/// "utt <id> <frames> <dim>" followed by frames*dim little-endian float32.
void write_features(const std::string& path, const Dataset& data);
Dataset read_features(const std::string& path);

/// Transcript file: one line per utterance, "<id> <token ids...>".
void write_transcripts(const std::string& path, const Dataset& data);
void read_transcripts(const std::string& path, Dataset& data);

Dataset load_dataset(const std::string& features_path, const std::string& transcripts_path);

Tensor features_tensor(const Utterance& utt);

/// Length-sorted batches of batch_size utterances; batch order is shuffled
/// with the given rng so epochs differ while staying reproducible.
std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, int batch_size,
                                                   Rng& order_rng);

/// Levenshtein distance between token sequences.
std::int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace smc
