#include "oneref/param_store.hpp"

#include <cstring>
#include <fstream>

#include "oneref/error.hpp"

namespace oneref {

ValuePtr ParamStore::param(const std::string& name, int64_t rows, int64_t cols, bool zero_init) {
  auto it = entries_.find(name);
  if (it != entries_.end()) return it->second;
  Tensor t(rows, cols);
  if (!zero_init)
    for (int64_t i = 0; i < t.size(); ++i) t.data[i] = rng_.truncated_normal(0.02);
  auto v = leaf(std::move(t), true);
  entries_.emplace(name, v);
  return v;
}

ValuePtr ParamStore::param_constant(const std::string& name, int64_t rows, int64_t cols,
                                    double fill) {
  auto it = entries_.find(name);
  if (it != entries_.end()) return it->second;
  auto v = leaf(Tensor::full(rows, cols, fill), true);
  entries_.emplace(name, v);
  return v;
}

ValuePtr ParamStore::state(const std::string& name, int64_t rows, int64_t cols) {
  auto it = entries_.find(name);
  if (it != entries_.end()) return it->second;
  auto v = leaf(Tensor(rows, cols), false);
  entries_.emplace(name, v);
  return v;
}

ValuePtr ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail("MissingParam", name);
  return it->second;
}

std::vector<std::pair<std::string, ValuePtr>> ParamStore::trainable() const {
  std::vector<std::pair<std::string, ValuePtr>> out;
  for (const auto& [name, v] : entries_)
    if (v->requires_grad) out.emplace_back(name, v);
  return out;
}

std::vector<std::pair<std::string, ValuePtr>> ParamStore::all() const {
  return {entries_.begin(), entries_.end()};
}

void ParamStore::zero_grads() {
  for (auto& [name, v] : entries_)
    if (v->requires_grad) v->zero_grad();
}

int64_t ParamStore::num_trainable_scalars() const {
  int64_t n = 0;
  for (const auto& [name, v] : entries_)
    if (v->requires_grad) n += v->data.size();
  return n;
}

void ParamStore::freeze() {
  for (auto& [name, v] : entries_) v->requires_grad = false;
}

namespace {

constexpr char kMagic[5] = {'O', 'R', 'K', 'T', '1'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) fail("ParseError", "truncated checkpoint");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void write_f64_le(std::ostream& os, const double* p, size_t n) {
  // Little-endian host assumed (checked below); bytes written verbatim.
  os.write(reinterpret_cast<const char*>(p), n * sizeof(double));
}

bool host_is_little_endian() {
  const uint32_t probe = 1;
  return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::string& header_text) {
  if (!host_is_little_endian()) fail("Unsupported", "big-endian host");
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("IoError", "cannot write " + path);
  os.write(kMagic, 5);
  write_u32(os, static_cast<uint32_t>(header_text.size()));
  os.write(header_text.data(), header_text.size());
  for (const auto& [name, v] : store.all()) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), name.size());
    write_u32(os, 2);
    write_u32(os, static_cast<uint32_t>(v->data.rows));
    write_u32(os, static_cast<uint32_t>(v->data.cols));
    write_f64_le(os, v->data.data.data(), v->data.size());
  }
  if (!os) fail("IoError", "write failure on " + path);
}

std::string load_checkpoint(ParamStore& store, const std::string& path) {
  if (!host_is_little_endian()) fail("Unsupported", "big-endian host");
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("IoError", "cannot read " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) fail("ParseError", "bad checkpoint magic in " + path);
  const uint32_t header_len = read_u32(is);
  std::string header(header_len, '\0');
  is.read(header.data(), header_len);
  if (!is) fail("ParseError", "truncated checkpoint header");
  while (true) {
    is.peek();
    if (is.eof()) break;
    const uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t rank = read_u32(is);
    if (rank != 2) fail("ParseError", "unexpected rank " + std::to_string(rank));
    const uint32_t rows = read_u32(is);
    const uint32_t cols = read_u32(is);
    Tensor t(rows, cols);
    is.read(reinterpret_cast<char*>(t.data.data()), t.size() * sizeof(double));
    if (!is) fail("ParseError", "truncated tensor data for " + name);
    const bool is_state = !name.empty() && name[0] == '_';
    ValuePtr v;
    if (is_state) {
      v = store.state(name, rows, cols);
    } else {
      v = store.param(name, rows, cols, true);
    }
    if (v->data.rows != t.rows || v->data.cols != t.cols)
      fail("ShapeMismatch", "checkpoint entry " + name + " has " + t.shape_str() + ", expected " +
                                v->data.shape_str());
    v->data = std::move(t);
  }
  return header;
}

std::string read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("IoError", "cannot read " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0) fail("ParseError", "bad checkpoint magic in " + path);
  const uint32_t header_len = read_u32(is);
  std::string header(header_len, '\0');
  is.read(header.data(), header_len);
  if (!is) fail("ParseError", "truncated checkpoint header");
  return header;
}

}  // namespace oneref
