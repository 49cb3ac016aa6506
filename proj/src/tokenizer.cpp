#include "oneref/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "oneref/error.hpp"

namespace oneref {

TextVocab TextVocab::build(const std::vector<std::string>& words) {
  TextVocab v;
  v.tokens_ = {kPad, kSep, kEos, kMask, kUnk};
  std::set<std::string> sorted;
  for (const auto& w : words) {
    std::string lower;
    for (char c : w) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (!lower.empty()) sorted.insert(lower);
  }
  for (const auto& w : sorted) v.tokens_.push_back(w);
  for (size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int64_t>(i);
  return v;
}

TextVocab TextVocab::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("IoError", "cannot read vocab " + path);
  TextVocab v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    v.index_[line] = static_cast<int64_t>(v.tokens_.size());
    v.tokens_.push_back(line);
  }
  if (v.size() < kNumSpecials || v.tokens_[0] != kPad || v.tokens_[1] != kSep ||
      v.tokens_[2] != kEos || v.tokens_[3] != kMask || v.tokens_[4] != kUnk)
    fail("ParseError", "vocab " + path + " is missing the special-token prefix");
  return v;
}

void TextVocab::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) fail("IoError", "cannot write vocab " + path);
  for (const auto& t : tokens_) os << t << "\n";
}

int64_t TextVocab::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk_id() : it->second;
}

const std::string& TextVocab::token_of(int64_t id) const {
  if (id < 0 || id >= size()) fail("ParseError", "token id " + std::to_string(id) + " out of vocab");
  return tokens_[id];
}

Tokenized tokenize(const std::string& expression, const TextVocab& vocab, int max_len) {
  if (max_len < 2) fail("ShapeMismatch", "max_len must fit sep and eos");
  std::istringstream ss(expression);
  std::string word;
  std::vector<int64_t> word_ids;
  while (ss >> word) {
    std::string lower;
    for (char c : word) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    word_ids.push_back(vocab.id_of(lower));
  }
  if (static_cast<int>(word_ids.size()) > max_len - 2) word_ids.resize(max_len - 2);

  Tokenized out;
  out.n_words = static_cast<int>(word_ids.size());
  out.ids.reserve(max_len);
  out.ids.push_back(vocab.sep_id());
  for (int64_t id : word_ids) out.ids.push_back(id);
  out.ids.push_back(vocab.eos_id());
  while (static_cast<int>(out.ids.size()) < max_len) out.ids.push_back(vocab.pad_id());
  return out;
}

std::string detokenize(const std::vector<int64_t>& ids, const TextVocab& vocab) {
  std::string out;
  bool started = false;
  for (int64_t id : ids) {
    if (id == vocab.sep_id()) {
      started = true;
      continue;
    }
    if (id == vocab.eos_id()) break;
    if (!started) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token_of(id);
  }
  return out;
}

VisualTokenizer VisualTokenizer::fit(const Tensor& samples, int k, uint64_t seed, int iters) {
  if (samples.rows < 1 || samples.cols != 3) fail("ShapeMismatch", "tokenizer samples " + samples.shape_str());
  Rng rng(seed);
  Tensor centroids(k, 3);
  // Seeded init from distinct sample rows (repeats allowed when N < k).
  for (int c = 0; c < k; ++c) {
    const int64_t pick = static_cast<int64_t>(rng.below(samples.rows));
    centroids.mat().row(c) = samples.mat().row(pick);
  }
  std::vector<int> owner(samples.rows);
  for (int it = 0; it < iters; ++it) {
    for (int64_t i = 0; i < samples.rows; ++i) {
      double best = 1e300;
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = (samples.mat().row(i) - centroids.mat().row(c)).squaredNorm();
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      owner[i] = arg;
    }
    Tensor sums(k, 3);
    std::vector<int64_t> counts(k, 0);
    for (int64_t i = 0; i < samples.rows; ++i) {
      sums.mat().row(owner[i]) += samples.mat().row(i);
      counts[owner[i]]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed empty clusters deterministically.
        const int64_t pick = static_cast<int64_t>(rng.below(samples.rows));
        centroids.mat().row(c) = samples.mat().row(pick);
      } else {
        centroids.mat().row(c) = sums.mat().row(c) / static_cast<double>(counts[c]);
      }
    }
  }
  VisualTokenizer tok;
  tok.centroids_ = std::move(centroids);
  return tok;
}

std::vector<int64_t> VisualTokenizer::assign(const Tensor& patch_mean_rgb) const {
  if (patch_mean_rgb.cols != 3) fail("ShapeMismatch", "assign input " + patch_mean_rgb.shape_str());
  std::vector<int64_t> codes(patch_mean_rgb.rows);
  for (int64_t i = 0; i < patch_mean_rgb.rows; ++i) {
    double best = 1e300;
    int64_t arg = 0;
    for (int64_t c = 0; c < centroids_.rows; ++c) {
      const double d = (patch_mean_rgb.mat().row(i) - centroids_.mat().row(c)).squaredNorm();
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    codes[i] = arg;
  }
  return codes;
}

VisualTokenizer VisualTokenizer::from_centroids(Tensor centroids) {
  VisualTokenizer tok;
  tok.centroids_ = std::move(centroids);
  return tok;
}

}  // namespace oneref
