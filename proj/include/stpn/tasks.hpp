#pragma once

// Supervised sequence tasks.
//
// Associative retrieval: K1 V1 K2 V2 ... Kn Vn ? ? Q, one-hot over 38 tokens
// (26 letters, 10 digits, '?' and a reserved token). Keys are distinct letters,
// values are digits drawn with replacement, Q is one of the keys and the target
// is its value. Only the last step is scored; optional trailing cue tokens
// (the reserved token) delay the readout past the query.
//
// Continual familiarity: a stream of ±1 vectors. With probability p the vector
// from R steps ago is shown again, unless that vector was itself a repeat.
// Every step is scored with target 1 for a repeat, 0 for a novel vector.
// A constant +1 column is appended by default. The cells have no bias and tanh
// is odd, so without it flipping every input sign flips h exactly while the
// labels stay the same, and a linear readout cannot beat the majority class.

#include <cstdint>
#include <ostream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stpn/tensor.hpp"

namespace stpn {

struct Sequence {
  Matrix inputs;                    // T x d, one row per timestep
  std::vector<int> targets;         // class index per step (-1 where unscored)
  std::vector<unsigned char> mask;  // 1 where the loss is applied
  std::vector<int> tokens;          // token ids for symbolic tasks, else empty

  std::size_t length() const { return inputs.rows(); }
};

struct TaskBatch {
  std::vector<Sequence> sequences;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  nlohmann::json meta;

  std::size_t size() const { return sequences.size(); }
};

namespace art {
inline constexpr int kLetters = 26;
inline constexpr int kDigits = 10;
inline constexpr int kFirstDigit = 26;
inline constexpr int kSeparator = 36;
inline constexpr int kReserved = 37;
inline constexpr int kVocab = 38;

inline char token_char(int t) {
  if (t < kLetters) return static_cast<char>('a' + t);
  if (t < kFirstDigit + kDigits) return static_cast<char>('0' + (t - kFirstDigit));
  return t == kSeparator ? '?' : '#';
}
}  // namespace art

struct ArtConfig {
  std::size_t num_pairs = 8;
  // Cue tokens appended after the query; the answer is scored on the last of
  // them. 0 scores the query step itself.
  std::size_t query_delay = 0;
};

inline std::size_t art_length(const ArtConfig& cfg) {
  return 2 * cfg.num_pairs + 3 + cfg.query_delay;
}

inline Sequence art_sequence_from_tokens(const std::vector<int>& tokens, int target) {
  Sequence s;
  s.tokens = tokens;
  const std::size_t T = tokens.size();
  s.inputs = Matrix(T, art::kVocab);
  for (std::size_t t = 0; t < T; ++t) s.inputs(t, static_cast<std::size_t>(tokens[t])) = 1.0;
  s.targets.assign(T, -1);
  s.mask.assign(T, 0);
  if (T > 0) {
    s.targets[T - 1] = target;
    s.mask[T - 1] = 1;
  }
  return s;
}

inline Sequence gen_art_sequence(Rng& rng, const ArtConfig& cfg) {
  if (cfg.num_pairs == 0 || cfg.num_pairs > static_cast<std::size_t>(art::kLetters))
    throw Error("gen_art: num_pairs must be in [1, 26]");
  std::vector<int> letters(art::kLetters);
  for (int i = 0; i < art::kLetters; ++i) letters[i] = i;
  // partial Fisher-Yates: the first num_pairs entries become the keys
  for (std::size_t i = 0; i < cfg.num_pairs; ++i) {
    const std::size_t j = i + rng.below(letters.size() - i);
    std::swap(letters[i], letters[j]);
  }
  std::vector<int> tokens;
  tokens.reserve(art_length(cfg));
  std::vector<int> values(cfg.num_pairs);
  for (std::size_t k = 0; k < cfg.num_pairs; ++k) {
    values[k] = static_cast<int>(rng.below(art::kDigits));
    tokens.push_back(letters[k]);
    tokens.push_back(art::kFirstDigit + values[k]);
  }
  tokens.push_back(art::kSeparator);
  tokens.push_back(art::kSeparator);
  const std::size_t q = rng.below(cfg.num_pairs);
  tokens.push_back(letters[q]);
  for (std::size_t k = 0; k < cfg.query_delay; ++k) tokens.push_back(art::kReserved);
  return art_sequence_from_tokens(tokens, values[q]);
}

inline nlohmann::json art_meta(const ArtConfig& cfg) {
  return {{"task", "art"},
          {"num_pairs", cfg.num_pairs},
          {"query_delay", cfg.query_delay},
          {"vocab", art::kVocab}};
}

inline TaskBatch gen_art(Rng& rng, const ArtConfig& cfg, std::size_t batch) {
  TaskBatch b;
  b.input_dim = art::kVocab;
  b.num_classes = art::kDigits;
  b.meta = art_meta(cfg);
  b.sequences.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) b.sequences.push_back(gen_art_sequence(rng, cfg));
  return b;
}

inline std::string art_key(const Sequence& s) { return std::string(s.tokens.begin(), s.tokens.end()); }

// Draws n sequences, skipping any whose token string is in `exclude`.
inline TaskBatch gen_art_excluding(Rng& rng, const ArtConfig& cfg, std::size_t n,
                                   const std::unordered_set<std::string>& exclude) {
  TaskBatch b;
  b.input_dim = art::kVocab;
  b.num_classes = art::kDigits;
  b.meta = art_meta(cfg);
  b.sequences.reserve(n);
  std::size_t attempts = 0;
  while (b.sequences.size() < n) {
    if (++attempts > 100 * (n + 1)) throw Error("gen_art: cannot find enough unseen sequences");
    Sequence s = gen_art_sequence(rng, cfg);
    if (exclude.count(art_key(s))) continue;
    b.sequences.push_back(std::move(s));
  }
  return b;
}

// Training and validation sets from independent streams of `rng`; validation
// sequences that duplicate a training sequence exactly are redrawn.
inline std::pair<TaskBatch, TaskBatch> make_art_splits(Rng& rng, const ArtConfig& cfg,
                                                       std::size_t n_train, std::size_t n_val) {
  Rng train_rng = rng.split(1);
  Rng val_rng = rng.split(2);
  TaskBatch train = gen_art(train_rng, cfg, n_train);
  std::unordered_set<std::string> seen;
  for (const auto& s : train.sequences) seen.insert(art_key(s));
  TaskBatch val = gen_art_excluding(val_rng, cfg, n_val, seen);
  return {std::move(train), std::move(val)};
}

enum class FamiliarityMode { dataset, infinite };

struct FamiliarityConfig {
  std::size_t d = 25;
  std::size_t R = 3;
  double p = 0.5;
  std::size_t T = 500;
  FamiliarityMode mode = FamiliarityMode::infinite;
  bool constant_input = true;
};

inline std::size_t familiarity_width(const FamiliarityConfig& cfg) {
  return cfg.d + (cfg.constant_input ? 1 : 0);
}

inline void validate(const FamiliarityConfig& cfg) {
  if (cfg.d == 0) throw Error("familiarity: d must be >= 1");
  if (cfg.R < 1) throw Error("familiarity: R must be >= 1");
  if (!(cfg.p >= 0.0 && cfg.p <= 1.0)) throw Error("familiarity: p must be in [0, 1]");
  if (cfg.T <= cfg.R) throw Error("familiarity: T must exceed R");
}

inline nlohmann::json familiarity_meta(const FamiliarityConfig& cfg) {
  return {{"task", "familiarity"},
          {"d", cfg.d},
          {"R", cfg.R},
          {"p", cfg.p},
          {"T", cfg.T},
          {"mode", cfg.mode == FamiliarityMode::dataset ? "dataset" : "infinite"},
          {"constant_input", cfg.constant_input}};
}

inline Sequence gen_familiarity_sequence(Rng& rng, const FamiliarityConfig& cfg, std::size_t T) {
  Sequence s;
  const std::size_t width = familiarity_width(cfg);
  s.inputs = Matrix(T, width);
  s.targets.assign(T, 0);
  s.mask.assign(T, 1);
  for (std::size_t t = 0; t < T; ++t) {
    bool repeat = false;
    if (t >= cfg.R) repeat = rng.bernoulli(cfg.p) && s.targets[t - cfg.R] == 0;
    double* row = s.inputs.row(t);
    if (repeat) {
      const double* src = s.inputs.row(t - cfg.R);
      for (std::size_t i = 0; i < width; ++i) row[i] = src[i];
      s.targets[t] = 1;
    } else {
      for (std::size_t i = 0; i < cfg.d; ++i) row[i] = (rng.next_u64() >> 63) ? 1.0 : -1.0;
      if (cfg.constant_input) row[cfg.d] = 1.0;
    }
  }
  return s;
}

inline TaskBatch gen_familiarity(Rng& rng, const FamiliarityConfig& cfg) {
  validate(cfg);
  TaskBatch b;
  b.input_dim = familiarity_width(cfg);
  b.num_classes = 2;
  b.meta = familiarity_meta(cfg);
  b.sequences.push_back(gen_familiarity_sequence(rng, cfg, cfg.T));
  return b;
}

// 'dataset' mode: one fixed training stream of n_train vectors, reused every
// iteration, and a validation stream of n_val vectors from a separate stream.
inline std::pair<TaskBatch, TaskBatch> dataset_mode_split(Rng& rng, const FamiliarityConfig& cfg,
                                                          std::size_t n_train, std::size_t n_val) {
  validate(cfg);
  if (n_train <= cfg.R || n_val <= cfg.R)
    throw Error("dataset_mode_split: stream lengths must exceed R");
  Rng train_rng = rng.split(1);
  Rng val_rng = rng.split(2);
  auto make = [&](Rng& r, std::size_t n) {
    TaskBatch b;
    b.input_dim = familiarity_width(cfg);
    b.num_classes = 2;
    b.meta = familiarity_meta(cfg);
    b.meta["T"] = n;
    b.sequences.push_back(gen_familiarity_sequence(r, cfg, n));
    return b;
  };
  TaskBatch train = make(train_rng, n_train);
  TaskBatch val = make(val_rng, n_val);
  return {std::move(train), std::move(val)};
}

// One JSON object per sequence: token ids (or ±1 rows), targets and mask.
inline void write_jsonl(std::ostream& os, const TaskBatch& b) {
  for (const auto& s : b.sequences) {
    nlohmann::json j;
    if (!s.tokens.empty()) {
      j["tokens"] = s.tokens;
    } else {
      std::vector<std::vector<int>> rows(s.length());
      for (std::size_t t = 0; t < s.length(); ++t)
        for (std::size_t i = 0; i < s.inputs.cols(); ++i)
          rows[t].push_back(static_cast<int>(s.inputs(t, i)));
      j["inputs"] = rows;
    }
    j["targets"] = s.targets;
    std::vector<int> mask(s.mask.begin(), s.mask.end());
    j["mask"] = mask;
    j["meta"] = b.meta;
    os << j.dump() << '\n';
  }
}

}  // namespace stpn
