#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "oneref/rng.hpp"
#include "oneref/tensor.hpp"

namespace oneref {

// Whitespace vocabulary with fixed special ids. vocab.txt keeps one token
// per line, line order = id order.
class TextVocab {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kSep = "<sep>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kMask = "<mask>";
  static constexpr const char* kUnk = "<unk>";

  static TextVocab build(const std::vector<std::string>& words);
  static TextVocab load(const std::string& path);
  void save(const std::string& path) const;

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  int64_t id_of(const std::string& token) const;  // unk id for OOV
  const std::string& token_of(int64_t id) const;

  int64_t pad_id() const { return 0; }
  int64_t sep_id() const { return 1; }
  int64_t eos_id() const { return 2; }
  int64_t mask_id() const { return 3; }
  int64_t unk_id() const { return 4; }
  static constexpr int64_t kNumSpecials = 5;

  bool is_special(int64_t id) const { return id < kNumSpecials && id != unk_id(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> index_;
};

struct Tokenized {
  std::vector<int64_t> ids;  // [sep, words..., eos, pad...] of length max_len
  int n_words = 0;           // real word tokens between sep and eos
};

// Lowercase whitespace tokenization, OOV -> unk, wrapped sep...eos, padded to
// max_len. Words beyond max_len - 2 are dropped.
Tokenized tokenize(const std::string& expression, const TextVocab& vocab, int max_len);

// Joins the word tokens between sep and eos.
std::string detokenize(const std::vector<int64_t>& ids, const TextVocab& vocab);

// Toy visual tokenizer: a K-way codebook over per-patch mean RGB, built by
// seeded k-means over the training corpus and frozen thereafter.
class VisualTokenizer {
 public:
  // samples: N x 3 mean-RGB rows.
  static VisualTokenizer fit(const Tensor& samples, int k, uint64_t seed, int iters = 25);

  // Nearest-centroid id per row of an N_v x 3 matrix.
  std::vector<int64_t> assign(const Tensor& patch_mean_rgb) const;

  const Tensor& centroids() const { return centroids_; }
  static VisualTokenizer from_centroids(Tensor centroids);

 private:
  Tensor centroids_;  // K x 3
};

}  // namespace oneref
