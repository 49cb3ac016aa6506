#include "oneref/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "oneref/error.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace oneref {

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::array<std::array<double, 3>, 4> kColorRgb = {{
    {0.85, 0.16, 0.16},  // red
    {0.18, 0.71, 0.25},  // green
    {0.17, 0.30, 0.82},  // blue
    {0.92, 0.86, 0.20},  // yellow
}};

std::vector<double> make_polygon(int shape, double cx, double cy, double s) {
  std::vector<double> poly;
  switch (shape) {
    case 0: {  // circle as a 40-gon (axis extremes included)
      const int n = 40;
      poly.reserve(2 * n);
      for (int i = 0; i < n; ++i) {
        const double a = 2.0 * kPi * i / n;
        poly.push_back(cx + s * std::cos(a));
        poly.push_back(cy + s * std::sin(a));
      }
      break;
    }
    case 1:  // square
      poly = {cx - s, cy - s, cx + s, cy - s, cx + s, cy + s, cx - s, cy + s};
      break;
    default: {  // triangle, apex up (screen y grows downward)
      const double r3 = std::sqrt(3.0) / 2.0;
      poly = {cx, cy - s, cx + s * r3, cy + 0.5 * s, cx - s * r3, cy + 0.5 * s};
      break;
    }
  }
  return poly;
}

void set_bbox(SceneObject& o) {
  o.bx0 = o.poly[0];
  o.bx1 = o.poly[0];
  o.by0 = o.poly[1];
  o.by1 = o.poly[1];
  for (size_t i = 0; i < o.poly.size(); i += 2) {
    o.bx0 = std::min(o.bx0, o.poly[i]);
    o.bx1 = std::max(o.bx1, o.poly[i]);
    o.by0 = std::min(o.by0, o.poly[i + 1]);
    o.by1 = std::max(o.by1, o.poly[i + 1]);
  }
}

// rel: 0 left-of, 1 right-of, 2 above, 3 below. tau in pixels.
bool satisfies_relation(const SceneObject& t, const SceneObject& a, int rel, double tau) {
  switch (rel) {
    case 0: return t.cx <= a.cx - tau;
    case 1: return t.cx >= a.cx + tau;
    case 2: return t.cy <= a.cy - tau;
    default: return t.cy >= a.cy + tau;
  }
}

const char* relation_phrase(int rel) {
  switch (rel) {
    case 0: return "left of";
    case 1: return "right of";
    case 2: return "above";
    default: return "below";
  }
}

struct Candidate {
  int target = -1;
  std::string expression;
  std::pair<uint32_t, uint32_t> span;  // word-token indices
};

// Enumerates every unambiguous expression for the scene.
std::vector<Candidate> enumerate_candidates(const Scene& scene) {
  const auto& objs = scene.objects;
  std::vector<Candidate> out;
  auto descriptor_count = [&objs](int color, int shape) {
    int n = 0;
    for (const auto& o : objs) n += (o.color == color && o.shape == shape);
    return n;
  };
  auto shape_count = [&objs](int shape) {
    int n = 0;
    for (const auto& o : objs) n += (o.shape == shape);
    return n;
  };

  for (size_t t = 0; t < objs.size(); ++t) {
    const auto& obj = objs[t];
    const std::string color = kColorNames[obj.color];
    const std::string shape = kShapeNames[obj.shape];
    if (descriptor_count(obj.color, obj.shape) == 1)
      out.push_back({int(t), "the " + color + " " + shape, {1, 3}});
    if (shape_count(obj.shape) == 1) out.push_back({int(t), "the " + shape, {1, 2}});

    // Relational form: anchor must be unique by (color, shape); the target
    // descriptor plus relation must single out exactly this object, with the
    // competitors not even weakly on the relation side.
    for (size_t a = 0; a < objs.size(); ++a) {
      if (a == t) continue;
      const auto& anc = objs[a];
      if (descriptor_count(anc.color, anc.shape) != 1) continue;
      for (int rel = 0; rel < 4; ++rel) {
        if (!satisfies_relation(obj, anc, rel, kRelationMarginPx)) continue;
        bool clean = true;
        for (size_t o = 0; o < objs.size() && clean; ++o) {
          if (o == t || o == a) continue;
          if (objs[o].color == obj.color && objs[o].shape == obj.shape &&
              satisfies_relation(objs[o], anc, rel, 0.0))
            clean = false;
        }
        if (!clean) continue;
        out.push_back({int(t),
                       "the " + color + " " + shape + " " + relation_phrase(rel) + " the " +
                           std::string(kColorNames[anc.color]) + " " +
                           std::string(kShapeNames[anc.shape]),
                       {1, 3}});
      }
    }
  }
  return out;
}

Scene draw_scene(const SceneSpec& spec, Rng& rng) {
  Scene scene;
  scene.image_size = spec.image_size;
  const int n = static_cast<int>(rng.range_inclusive(spec.min_objects, spec.max_objects));
  for (int attempt = 0; attempt < 200 && static_cast<int>(scene.objects.size()) < n; ++attempt) {
    SceneObject o;
    o.shape = static_cast<int>(rng.below(kShapeNames.size()));
    o.color = static_cast<int>(rng.below(kColorNames.size()));
    o.size = rng.uniform(9.0, 16.0);
    const double lo = o.size + 3.0, hi = spec.image_size - o.size - 3.0;
    o.cx = rng.uniform(lo, hi);
    o.cy = rng.uniform(lo, hi);
    o.poly = make_polygon(o.shape, o.cx, o.cy, o.size);
    set_bbox(o);
    bool collides = false;
    for (const auto& other : scene.objects) {
      if (o.bx0 - 3 < other.bx1 && other.bx0 - 3 < o.bx1 && o.by0 - 3 < other.by1 &&
          other.by0 - 3 < o.by1) {
        collides = true;
        break;
      }
    }
    if (!collides) scene.objects.push_back(std::move(o));
  }
  return scene;
}

}  // namespace

ImageF64 render_scene(const Scene& scene, Rng& rng) {
  const int hw = scene.image_size;
  ImageF64 img(hw, hw);
  for (double& v : img.pix) v = std::clamp(0.82 + 0.015 * rng.normal(), 0.0, 1.0);
  for (const auto& o : scene.objects) {
    std::array<double, 3> rgb = kColorRgb[o.color];
    for (double& c : rgb) c = std::clamp(c + rng.uniform(-0.04, 0.04), 0.0, 1.0);
    const auto mask = rasterize_polygon(o.poly, hw, hw);
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x)
        if (mask[size_t(y) * hw + x])
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
  }
  return img;
}

GeneratedSample generate_sample(const SceneSpec& spec, uint64_t sample_index) {
  Rng rng = per_sample_rng(spec.seed, sample_index);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Scene scene = draw_scene(spec, rng);
    if (scene.objects.size() < spec.min_objects) continue;
    auto candidates = enumerate_candidates(scene);
    if (candidates.empty()) continue;
    const auto& pick = candidates[rng.below(candidates.size())];
    GeneratedSample out;
    out.scene = std::move(scene);
    out.target_index = pick.target;
    out.expression = pick.expression;
    out.subject_span = pick.span;
    return out;
  }
  fail("AmbiguousScene", "no unambiguous expression after 100 scenes (sample " +
                             std::to_string(sample_index) + ")");
}

std::vector<std::string> generator_word_list() {
  std::vector<std::string> words = {"the", "left", "right", "of", "above", "below"};
  for (const char* c : kColorNames) words.push_back(c);
  for (const char* s : kShapeNames) words.push_back(s);
  return words;
}

void generate_corpus(const SceneSpec& spec, uint32_t n_samples,
                     std::array<double, 3> split_ratios, const std::string& out_dir) {
  const double ratio_sum = split_ratios[0] + split_ratios[1] + split_ratios[2];
  if (std::abs(ratio_sum - 1.0) > 1e-9)
    fail("InvalidWeights", "split ratios sum to " + std::to_string(ratio_sum));

  fs::create_directories(fs::path(out_dir) / "images");
  TextVocab vocab = TextVocab::build(generator_word_list());
  vocab.save((fs::path(out_dir) / "vocab.txt").string());

  const uint32_t n_train = static_cast<uint32_t>(std::floor(split_ratios[0] * n_samples));
  const uint32_t n_val = static_cast<uint32_t>(std::floor(split_ratios[1] * n_samples));

  std::ofstream train_os(fs::path(out_dir) / "train.jsonl");
  std::ofstream val_os(fs::path(out_dir) / "val.jsonl");
  std::ofstream test_os(fs::path(out_dir) / "test.jsonl");
  if (!train_os || !val_os || !test_os) fail("IoError", "cannot write corpus files in " + out_dir);

  for (uint32_t i = 0; i < n_samples; ++i) {
    GeneratedSample gs;
    try {
      gs = generate_sample(spec, i);
    } catch (const Error& e) {
      if (e.code() == "AmbiguousScene") continue;  // skipped
      throw;
    }
    Rng render_rng = per_sample_rng(spec.seed ^ 0x5eedULL, i);
    const ImageF64 img = render_scene(gs.scene, render_rng);

    char name[32];
    std::snprintf(name, sizeof(name), "images/%08u.ppm", i);
    write_ppm(to_u8(img), (fs::path(out_dir) / name).string());

    const auto& target = gs.scene.objects[gs.target_index];
    json rec;
    rec["image"] = name;
    rec["bbox"] = {target.bx0, target.by0, target.bx1 - target.bx0, target.by1 - target.by0};
    rec["expression"] = gs.expression;
    rec["mask_polygon"] = target.poly;
    rec["subject_span"] = {gs.subject_span.first, gs.subject_span.second};

    std::ofstream& os = i < n_train ? train_os : (i < n_train + n_val ? val_os : test_os);
    os << rec.dump() << "\n";
  }
}

std::vector<RefSample> load_jsonl(const std::string& jsonl_path, const std::string& base_dir,
                                  const TextVocab& vocab, int max_text_len,
                                  uint64_t first_sample_id) {
  std::ifstream is(jsonl_path);
  if (!is) fail("IoError", "cannot read " + jsonl_path);
  std::vector<RefSample> out;
  std::string line;
  uint64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail("ParseError", "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!rec.contains("image") || !rec.contains("bbox") || !rec.contains("expression") ||
        !rec["bbox"].is_array() || rec["bbox"].size() != 4)
      fail("ParseError", "line " + std::to_string(line_no) + ": missing required fields");

    RefSample s;
    s.sample_id = first_sample_id + out.size();
    s.image_path = (fs::path(base_dir) / rec["image"].get<std::string>()).string();
    s.image = read_ppm(s.image_path);
    s.expression = rec["expression"].get<std::string>();

    const double bx = rec["bbox"][0].get<double>();
    const double by = rec["bbox"][1].get<double>();
    const double bw = rec["bbox"][2].get<double>();
    const double bh = rec["bbox"][3].get<double>();
    if (bw <= 0.0 || bh <= 0.0)
      fail("DegenerateBox", "line " + std::to_string(line_no) + ": bbox " + std::to_string(bw) +
                                "x" + std::to_string(bh));
    Box box = Box::from_corners(bx / s.image.w, by / s.image.h, (bx + bw) / s.image.w,
                                (by + bh) / s.image.h)
                  .clip_to_unit();
    if (!box.valid())
      fail("DegenerateBox", "line " + std::to_string(line_no) + ": box outside the image");
    s.box = box;

    const Tokenized tok = tokenize(s.expression, vocab, max_text_len);
    s.token_ids = tok.ids;
    s.n_words = tok.n_words;

    if (rec.contains("mask_polygon")) {
      const auto poly = rec["mask_polygon"].get<std::vector<double>>();
      s.seg_mask = rasterize_polygon(poly, s.image.h, s.image.w);
    }
    if (rec.contains("subject_span")) {
      if (!rec["subject_span"].is_array() || rec["subject_span"].size() != 2)
        fail("ParseError", "line " + std::to_string(line_no) + ": bad subject_span");
      s.subject_span = {rec["subject_span"][0].get<uint32_t>(),
                        rec["subject_span"][1].get<uint32_t>()};
    }
    out.push_back(std::move(s));
  }
  return out;
}

Corpus Corpus::load(const std::string& dir, int max_text_len) {
  Corpus c;
  c.vocab = TextVocab::load((fs::path(dir) / "vocab.txt").string());
  c.train = load_jsonl((fs::path(dir) / "train.jsonl").string(), dir, c.vocab, max_text_len, 0);
  c.val = load_jsonl((fs::path(dir) / "val.jsonl").string(), dir, c.vocab, max_text_len,
                     c.train.size());
  c.test = load_jsonl((fs::path(dir) / "test.jsonl").string(), dir, c.vocab, max_text_len,
                      c.train.size() + c.val.size());
  for (const auto* split : {&c.train, &c.val, &c.test}) {
    for (const auto& s : *split) {
      if (c.image_size == 0) c.image_size = s.image.h;
      if (s.image.h != c.image_size || s.image.w != c.image_size)
        fail("BadImageShape", "inconsistent image sizes in corpus " + dir);
    }
  }
  return c;
}

}  // namespace oneref
