#pragma once

#include <map>
#include <string>
#include <vector>

#include "oneref/autodiff.hpp"
#include "oneref/rng.hpp"

namespace oneref {

// Named parameter container. Names starting with '_' are non-trainable state
// (optimizer moments, frozen codebooks); everything else is a trainable leaf.
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(uint64_t init_seed) : rng_(init_seed) {}

  // Creates (or returns) a trainable parameter. Fresh weights are drawn
  // truncated-normal std 0.02 unless `zero_init` is set (biases, LN bias).
  ValuePtr param(const std::string& name, int64_t rows, int64_t cols, bool zero_init = false);
  ValuePtr param_constant(const std::string& name, int64_t rows, int64_t cols, double fill);

  // Non-trainable named state (requires_grad = false).
  ValuePtr state(const std::string& name, int64_t rows, int64_t cols);

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  ValuePtr get(const std::string& name) const;

  // Trainable parameters in name order.
  std::vector<std::pair<std::string, ValuePtr>> trainable() const;
  // Everything, including state, in name order.
  std::vector<std::pair<std::string, ValuePtr>> all() const;

  void zero_grads();
  int64_t num_trainable_scalars() const;

  // Freezes every trainable entry (requires_grad = false); used for teachers.
  void freeze();

  Rng& rng() { return rng_; }

 private:
  std::map<std::string, ValuePtr> entries_;
  Rng rng_{0};
};

// Flat binary checkpoint: magic "ORKT1", u32 header length + header text
// (key=value lines), then per entry: u32 name length, name, u32 rank,
// u32 dims[rank], f64 data little-endian. Rank is always 2 here.
void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::string& header_text = "");

// Loads records into a fresh store; returns the header text. Entries whose
// names start with '_' are restored as state, others as trainable leaves.
std::string load_checkpoint(ParamStore& store, const std::string& path);

// Reads just the header text block.
std::string read_checkpoint_header(const std::string& path);

}  // namespace oneref
