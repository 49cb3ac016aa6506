#include "oneref/tensor.hpp"

#include "oneref/error.hpp"

namespace oneref {

Tensor Tensor::from_vector(const std::vector<double>& v, int64_t r, int64_t c) {
  if (static_cast<int64_t>(v.size()) != r * c)
    fail("ShapeMismatch", "vector of size " + std::to_string(v.size()) + " into [" +
                              std::to_string(r) + "," + std::to_string(c) + "]");
  Tensor t(r, c);
  for (int64_t i = 0; i < t.size(); ++i) t.data[i] = v[i];
  return t;
}

}  // namespace oneref
