#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oneref/geometry.hpp"

namespace oneref {

// Fraction of predictions whose IoU with the ground truth is >= thresh.
double acc_at_iou(const std::vector<Box>& preds, const std::vector<Box>& gts, double thresh = 0.5);

// IoU of two boolean masks. Both-empty pairs count as 1.0.
double mask_iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

struct MaskPair {
  std::vector<uint8_t> pred;
  std::vector<uint8_t> gt;
};

// Mean of per-sample IoUs.
double miou(const std::vector<MaskPair>& pairs);
// Total intersection over total union across all samples.
double oiou(const std::vector<MaskPair>& pairs);

// Binarization threshold applied to predicted probabilities (fixed).
constexpr double kMaskBinarizeThreshold = 0.5;
std::vector<uint8_t> binarize(const std::vector<double>& probs, double thresh = kMaskBinarizeThreshold);

// Evaluation report: "metric=value" lines (acc50, miou, oiou, n_samples).
struct EvalReport {
  double acc50 = 0.0;
  double miou = 0.0;
  double oiou = 0.0;
  int64_t n_samples = 0;

  std::string serialize() const;
  static EvalReport parse(const std::string& text);
  void save(const std::string& path) const;
  static EvalReport load(const std::string& path);
};

}  // namespace oneref
