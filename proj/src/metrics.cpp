#include "oneref/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "oneref/error.hpp"

namespace oneref {

double acc_at_iou(const std::vector<Box>& preds, const std::vector<Box>& gts, double thresh) {
  if (preds.empty() || preds.size() != gts.size())
    fail("EmptyEvalSet", "preds " + std::to_string(preds.size()) + " gts " +
                             std::to_string(gts.size()));
  int64_t hits = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (iou(preds[i], gts[i]) >= thresh) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double mask_iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  if (pred.size() != gt.size())
    fail("ShapeMismatch", "mask sizes " + std::to_string(pred.size()) + " vs " +
                              std::to_string(gt.size()));
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return 1.0;  // vacuous perfection on empty-vs-empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const std::vector<MaskPair>& pairs) {
  if (pairs.empty()) fail("EmptyEvalSet", "no mask pairs");
  double total = 0.0;
  for (const auto& p : pairs) total += mask_iou(p.pred, p.gt);
  return total / static_cast<double>(pairs.size());
}

double oiou(const std::vector<MaskPair>& pairs) {
  if (pairs.empty()) fail("EmptyEvalSet", "no mask pairs");
  int64_t inter = 0, uni = 0;
  for (const auto& p : pairs) {
    if (p.pred.size() != p.gt.size()) fail("ShapeMismatch", "mask sizes differ within a pair");
    for (size_t i = 0; i < p.pred.size(); ++i) {
      const bool a = p.pred[i] != 0, b = p.gt[i] != 0;
      inter += a && b;
      uni += a || b;
    }
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<uint8_t> binarize(const std::vector<double>& probs, double thresh) {
  std::vector<uint8_t> out(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= thresh ? 1 : 0;
  return out;
}

namespace {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string EvalReport::serialize() const {
  std::string out;
  out += "acc50=" + format_g17(acc50) + "\n";
  out += "miou=" + format_g17(miou) + "\n";
  out += "oiou=" + format_g17(oiou) + "\n";
  out += "n_samples=" + std::to_string(n_samples) + "\n";
  return out;
}

EvalReport EvalReport::parse(const std::string& text) {
  EvalReport r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("ParseError", "bad report line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "acc50") r.acc50 = std::stod(val);
    else if (key == "miou") r.miou = std::stod(val);
    else if (key == "oiou") r.oiou = std::stod(val);
    else if (key == "n_samples") r.n_samples = std::stoll(val);
    else fail("ParseError", "unknown report key: " + key);
  }
  return r;
}

void EvalReport::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) fail("IoError", "cannot write report " + path);
  os << serialize();
}

EvalReport EvalReport::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("IoError", "cannot read report " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

}  // namespace oneref
