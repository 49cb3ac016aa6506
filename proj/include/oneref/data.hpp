#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oneref/geometry.hpp"
#include "oneref/image.hpp"
#include "oneref/tokenizer.hpp"

namespace oneref {

// One training instance as loaded into memory. Pixel data stays u8; patch
// matrices are extracted per batch.
struct RefSample {
  ImageU8 image;
  std::string image_path;
  std::string expression;
  std::vector<int64_t> token_ids;  // [sep, words..., eos, pad...]
  int n_words = 0;
  std::optional<std::pair<uint32_t, uint32_t>> subject_span;  // word-token indexed
  Box box;  // normalized center format
  std::vector<uint8_t> seg_mask;  // H*W bytes; empty when absent
  uint64_t sample_id = 0;
};

// Synthetic scene recipe: 2..5 disjoint colored shapes on a noisy gray
// background, one unambiguous referring expression per scene.
struct SceneSpec {
  uint32_t min_objects = 2;
  uint32_t max_objects = 5;
  int image_size = 96;
  uint64_t seed = 0;
};

inline constexpr std::array<const char*, 3> kShapeNames = {"circle", "square", "triangle"};
inline constexpr std::array<const char*, 4> kColorNames = {"red", "green", "blue", "yellow"};
// Relation threshold in pixels for "left of" / "right of" / "above" / "below".
inline constexpr double kRelationMarginPx = 8.0;

struct SceneObject {
  int shape = 0;  // index into kShapeNames
  int color = 0;  // index into kColorNames
  double cx = 0, cy = 0, size = 0;
  std::vector<double> poly;           // flat x,y vertex list, pixels
  double bx0 = 0, by0 = 0, bx1 = 0, by1 = 0;  // tight pixel bbox
};

struct Scene {
  std::vector<SceneObject> objects;
  int image_size = 0;
};

struct GeneratedSample {
  Scene scene;
  int target_index = -1;
  std::string expression;
  std::pair<uint32_t, uint32_t> subject_span;  // word-token indexed, excl. the article
};

// Deterministic per (spec.seed, sample_index). Throws AmbiguousScene when no
// unambiguous expression exists after 100 fresh scenes.
GeneratedSample generate_sample(const SceneSpec& spec, uint64_t sample_index);

// Renders shapes over the noisy background; rng drives noise and color jitter.
ImageF64 render_scene(const Scene& scene, Rng& rng);

// The fixed generator word list (article, colors, shapes, relation words).
std::vector<std::string> generator_word_list();

// Writes images/NNNNNNNN.ppm, train/val/test.jsonl and vocab.txt under
// out_dir. split_ratios must sum to 1. Ambiguous scenes are retried up to
// 100 times and then skipped.
void generate_corpus(const SceneSpec& spec, uint32_t n_samples,
                     std::array<double, 3> split_ratios, const std::string& out_dir);

// Streaming JSONL ingestion; bbox is pixel corner format [x,y,w,h], polygons
// are rasterized by even-odd fill. Throws ParseError(line), MissingImage,
// DegenerateBox(line).
std::vector<RefSample> load_jsonl(const std::string& jsonl_path, const std::string& base_dir,
                                  const TextVocab& vocab, int max_text_len,
                                  uint64_t first_sample_id = 0);

struct Corpus {
  TextVocab vocab;
  int image_size = 0;
  std::vector<RefSample> train, val, test;

  static Corpus load(const std::string& dir, int max_text_len);
};

}  // namespace oneref
