#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "oneref/data.hpp"
#include "oneref/error.hpp"

using namespace oneref;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("oneref_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Independent interpretation of the expression grammar: evaluates the
// expression against every object and returns the indices that satisfy it.
std::vector<int> oracle_matches(const Scene& scene, const std::string& expression) {
  std::istringstream ss(expression);
  std::vector<std::string> words;
  std::string w;
  while (ss >> w) words.push_back(w);

  auto color_index = [](const std::string& s) {
    for (size_t i = 0; i < kColorNames.size(); ++i)
      if (s == kColorNames[i]) return int(i);
    return -1;
  };
  auto shape_index = [](const std::string& s) {
    for (size_t i = 0; i < kShapeNames.size(); ++i)
      if (s == kShapeNames[i]) return int(i);
    return -1;
  };

  REQUIRE(words[0] == "the");
  size_t pos = 1;
  int color = color_index(words[pos]);
  if (color >= 0) ++pos;
  const int shape = shape_index(words[pos]);
  REQUIRE(shape >= 0);
  ++pos;

  int rel = -1, anc_color = -1, anc_shape = -1;
  if (pos < words.size()) {
    if (words[pos] == "left") {
      rel = 0;
      pos += 2;  // "left of"
    } else if (words[pos] == "right") {
      rel = 1;
      pos += 2;
    } else if (words[pos] == "above") {
      rel = 2;
      pos += 1;
    } else {
      REQUIRE(words[pos] == "below");
      rel = 3;
      pos += 1;
    }
    REQUIRE(words[pos] == "the");
    ++pos;
    anc_color = color_index(words[pos]);
    REQUIRE(anc_color >= 0);
    ++pos;
    anc_shape = shape_index(words[pos]);
    REQUIRE(anc_shape >= 0);
  }

  int anchor = -1;
  if (rel >= 0) {
    int count = 0;
    for (size_t i = 0; i < scene.objects.size(); ++i)
      if (scene.objects[i].color == anc_color && scene.objects[i].shape == anc_shape) {
        anchor = int(i);
        ++count;
      }
    REQUIRE(count == 1);  // anchors must be uniquely described
  }

  std::vector<int> matches;
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (o.shape != shape) continue;
    if (color >= 0 && o.color != color) continue;
    if (rel >= 0) {
      if (int(i) == anchor) continue;
      const auto& a = scene.objects[anchor];
      const double tau = kRelationMarginPx;
      bool ok = false;
      switch (rel) {
        case 0: ok = o.cx <= a.cx - tau; break;
        case 1: ok = o.cx >= a.cx + tau; break;
        case 2: ok = o.cy <= a.cy - tau; break;
        default: ok = o.cy >= a.cy + tau; break;
      }
      if (!ok) continue;
    }
    matches.push_back(int(i));
  }
  return matches;
}

}  // namespace

TEST_CASE("polygon rasterization: axis-aligned square covers exactly its area") {
  const std::vector<double> square = {10, 10, 20, 10, 20, 20, 10, 20};
  const auto mask = rasterize_polygon(square, 32, 32);
  int64_t count = 0;
  for (uint8_t v : mask) count += v;
  CHECK(count == 100);
  // Pixels with centers inside [10,20)^2.
  CHECK(mask[12 * 32 + 12] == 1);
  CHECK(mask[9 * 32 + 12] == 0);
  CHECK(mask[12 * 32 + 20] == 0);
  CHECK(mask[19 * 32 + 19] == 1);
}

TEST_CASE("ppm io round-trips bytes") {
  const std::string dir = temp_dir("ppm");
  ImageU8 img(5, 7);
  for (size_t i = 0; i < img.pix.size(); ++i) img.pix[i] = uint8_t((i * 37) % 256);
  write_ppm(img, dir + "/x.ppm");
  const ImageU8 back = read_ppm(dir + "/x.ppm");
  CHECK(back.h == 5);
  CHECK(back.w == 7);
  CHECK(back.pix == img.pix);
  CHECK_THROWS_AS(read_ppm(dir + "/missing.ppm"), Error);
  fs::remove_all(dir);
}

TEST_CASE("empty corpus generation produces valid files") {
  const std::string dir = temp_dir("empty");
  SceneSpec spec;
  spec.seed = 4;
  generate_corpus(spec, 0, {0.8, 0.1, 0.1}, dir);
  CHECK(fs::exists(dir + "/train.jsonl"));
  CHECK(fs::exists(dir + "/val.jsonl"));
  CHECK(fs::exists(dir + "/test.jsonl"));
  const TextVocab vocab = TextVocab::load(dir + "/vocab.txt");
  CHECK(vocab.size() >= 5 + 13);
  const auto samples = load_jsonl(dir + "/train.jsonl", dir, vocab, 16);
  CHECK(samples.empty());
  fs::remove_all(dir);
}

TEST_CASE("same seed produces byte-identical corpora") {
  const std::string d1 = temp_dir("rep1"), d2 = temp_dir("rep2");
  SceneSpec spec;
  spec.seed = 99;
  generate_corpus(spec, 12, {0.5, 0.25, 0.25}, d1);
  generate_corpus(spec, 12, {0.5, 0.25, 0.25}, d2);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"})
    CHECK(slurp(d1 + "/" + f) == slurp(d2 + "/" + f));
  for (const auto& entry : fs::directory_iterator(d1 + "/images")) {
    const std::string name = entry.path().filename().string();
    CHECK(slurp(entry.path().string()) == slurp(d2 + "/images/" + name));
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("every generated expression identifies exactly one object") {
  SceneSpec spec;
  spec.seed = 31337;
  for (uint64_t i = 0; i < 300; ++i) {
    const GeneratedSample gs = generate_sample(spec, i);
    const auto matches = oracle_matches(gs.scene, gs.expression);
    REQUIRE(matches.size() == 1);
    CHECK(matches[0] == gs.target_index);
  }
}

TEST_CASE("generated corpus loads with consistent invariants") {
  const std::string dir = temp_dir("load");
  SceneSpec spec;
  spec.seed = 11;
  generate_corpus(spec, 30, {0.6, 0.2, 0.2}, dir);
  const Corpus corpus = Corpus::load(dir, 16);
  CHECK(corpus.train.size() == 18);
  CHECK(corpus.val.size() == 6);
  CHECK(corpus.test.size() == 6);
  CHECK(corpus.image_size == 96);

  std::set<uint64_t> ids;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& s : *split) {
      CHECK(s.box.valid());
      CHECK(s.box.area() > 0.0);
      CHECK(ids.insert(s.sample_id).second);  // splits disjoint by id
      REQUIRE(!s.seg_mask.empty());
      REQUIRE(s.subject_span.has_value());
      CHECK(s.subject_span->second <= uint32_t(s.n_words));

      // Mask pixels stay within a 2 px dilation of the box.
      const auto corners = s.box.to_corners();
      const double x0 = corners[0] * 96 - 2, x1 = corners[2] * 96 + 2;
      const double y0 = corners[1] * 96 - 2, y1 = corners[3] * 96 + 2;
      for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x)
          if (s.seg_mask[size_t(y) * 96 + x]) {
            CHECK(x + 0.5 >= x0);
            CHECK(x + 0.5 <= x1);
            CHECK(y + 0.5 >= y0);
            CHECK(y + 0.5 <= y1);
          }
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("tokenize wraps, pads and round-trips") {
  const TextVocab vocab = TextVocab::build(generator_word_list());
  {
    const Tokenized t = tokenize("", vocab, 8);
    CHECK(t.n_words == 0);
    CHECK(t.ids.size() == 8);
    CHECK(t.ids[0] == vocab.sep_id());
    CHECK(t.ids[1] == vocab.eos_id());
    for (size_t i = 2; i < 8; ++i) CHECK(t.ids[i] == vocab.pad_id());
  }
  {
    const Tokenized t = tokenize("The RED circle", vocab, 8);
    CHECK(t.n_words == 3);
    CHECK(t.ids[0] == vocab.sep_id());
    CHECK(t.ids[1] == vocab.id_of("the"));
    CHECK(t.ids[2] == vocab.id_of("red"));
    CHECK(t.ids[3] == vocab.id_of("circle"));
    CHECK(t.ids[4] == vocab.eos_id());
    CHECK(detokenize(t.ids, vocab) == "the red circle");
  }
  {
    // OOV words map to unk.
    const Tokenized t = tokenize("the purple dodecahedron", vocab, 8);
    CHECK(t.ids[2] == vocab.unk_id());
    CHECK(t.ids[3] == vocab.unk_id());
  }
  // Corpus-wide round trip.
  SceneSpec spec;
  spec.seed = 21;
  for (uint64_t i = 0; i < 100; ++i) {
    const GeneratedSample gs = generate_sample(spec, i);
    const Tokenized t = tokenize(gs.expression, vocab, 16);
    CHECK(detokenize(t.ids, vocab) == gs.expression);
  }
}

TEST_CASE("jsonl loader validates records") {
  const std::string dir = temp_dir("badjsonl");
  const TextVocab vocab = TextVocab::build(generator_word_list());
  ImageU8 img(8, 8);
  fs::create_directories(dir + "/images");
  write_ppm(img, dir + "/images/00000000.ppm");

  auto write_jsonl = [&dir](const std::string& content) {
    std::ofstream os(dir + "/x.jsonl");
    os << content;
  };

  // Full-image bbox converts to the unit center box.
  write_jsonl(R"({"image":"images/00000000.ppm","bbox":[0,0,8,8],"expression":"the circle"})"
              "\n");
  auto samples = load_jsonl(dir + "/x.jsonl", dir, vocab, 8);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].box.x_c == doctest::Approx(0.5));
  CHECK(samples[0].box.w_r == doctest::Approx(1.0));
  CHECK(samples[0].seg_mask.empty());
  CHECK_FALSE(samples[0].subject_span.has_value());

  write_jsonl("this is not json\n");
  CHECK_THROWS_AS(load_jsonl(dir + "/x.jsonl", dir, vocab, 8), Error);

  write_jsonl(R"({"image":"images/00000000.ppm","bbox":[0,0,0,8],"expression":"x"})"
              "\n");
  try {
    load_jsonl(dir + "/x.jsonl", dir, vocab, 8);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "DegenerateBox");
  }

  write_jsonl(R"({"image":"images/nope.ppm","bbox":[0,0,8,8],"expression":"x"})"
              "\n");
  try {
    load_jsonl(dir + "/x.jsonl", dir, vocab, 8);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "MissingImage");
  }

  // Polygon rasterization through the loader: 10x10 square = 100 pixels.
  write_jsonl(
      R"({"image":"images/00000000.ppm","bbox":[2,2,4,4],"expression":"the square","mask_polygon":[2,2,6,2,6,6,2,6],"subject_span":[1,2]})"
      "\n");
  samples = load_jsonl(dir + "/x.jsonl", dir, vocab, 8);
  REQUIRE(samples.size() == 1);
  int64_t count = 0;
  for (uint8_t v : samples[0].seg_mask) count += v;
  CHECK(count == 16);
  REQUIRE(samples[0].subject_span.has_value());
  CHECK(samples[0].subject_span->first == 1);
  fs::remove_all(dir);
}

TEST_CASE("patch extraction matches manual indexing") {
  ImageU8 img(4, 4);
  for (size_t i = 0; i < img.pix.size(); ++i) img.pix[i] = uint8_t(i);
  const Tensor patches = extract_patches(to_f64(img), 2);
  REQUIRE(patches.rows == 4);
  REQUIRE(patches.cols == 12);
  // Patch (0,0) first pixel = image pixel (0,0).
  CHECK(patches.at(0, 0) == doctest::Approx(0.0 / 255.0));
  // Patch (1,1) covers image rows 2..3, cols 2..3; its first pixel channel 0
  // sits at flat index ((2*4)+2)*3 = 30.
  CHECK(patches.at(3, 0) == doctest::Approx(30.0 / 255.0));

  const Tensor means = patch_mean_rgb(to_f64(img), 2);
  REQUIRE(means.rows == 4);
  double manual = (img.pix[0] + img.pix[3] + img.pix[12] + img.pix[15]) / 4.0 / 255.0;
  CHECK(means.at(0, 0) == doctest::Approx(manual));
}
