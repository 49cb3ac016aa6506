#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "oneref/adamw.hpp"
#include "oneref/error.hpp"
#include "oneref/param_store.hpp"

using namespace oneref;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("oneref_ckpt_" + name)).string();
}

}  // namespace

TEST_CASE("checkpoint round-trips bit-exactly including state entries") {
  ParamStore store(77);
  auto w = store.param("layer/w", 7, 5);
  auto b = store.param("layer/b", 1, 5, true);
  auto s = store.state("_stash/codes", 3, 3);
  s->data.data.setRandom();
  b->data.data[2] = -0.0;  // sign of zero must survive
  w->data.data[0] = 1e-301;

  const std::string path = temp_path("roundtrip.bin");
  save_checkpoint(store, path, "kind=test\n");

  ParamStore loaded;
  const std::string header = load_checkpoint(loaded, path);
  CHECK(header == "kind=test\n");
  CHECK(read_checkpoint_header(path) == "kind=test\n");
  for (const auto& [name, v] : store.all()) {
    auto lv = loaded.get(name);
    REQUIRE(lv->data.rows == v->data.rows);
    REQUIRE(lv->data.cols == v->data.cols);
    for (int64_t i = 0; i < v->data.size(); ++i) {
      CHECK(std::memcmp(&lv->data.data[i], &v->data.data[i], sizeof(double)) == 0);
    }
  }
  // State entries load as non-trainable, parameters as trainable.
  CHECK_FALSE(loaded.get("_stash/codes")->requires_grad);
  CHECK(loaded.get("layer/w")->requires_grad);
  fs::remove(path);
}

TEST_CASE("save then load then save produces identical bytes") {
  ParamStore store(3);
  store.param("a", 4, 4);
  store.param("z/deep/name", 2, 8);
  store.state("_adam/t", 1, 1);
  const std::string p1 = temp_path("bytes1.bin"), p2 = temp_path("bytes2.bin");
  save_checkpoint(store, p1, "h=1\n");
  ParamStore loaded;
  load_checkpoint(loaded, p1);
  save_checkpoint(loaded, p2, "h=1\n");
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string path = temp_path("corrupt.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTCK";
  }
  ParamStore store;
  CHECK_THROWS_AS(load_checkpoint(store, path), Error);
  fs::remove(path);
  ParamStore store2;
  CHECK_THROWS_AS(load_checkpoint(store2, temp_path("missing_file.bin")), Error);
}

TEST_CASE("param store bookkeeping") {
  ParamStore store(5);
  auto w = store.param("w", 3, 4);
  CHECK(store.param("w", 3, 4) == w);  // same entry, no re-init
  CHECK(store.num_trainable_scalars() == 12);
  store.state("_m", 3, 4);
  CHECK(store.num_trainable_scalars() == 12);
  CHECK_THROWS_AS(store.get("nope"), Error);
  store.freeze();
  CHECK_FALSE(store.get("w")->requires_grad);
}

TEST_CASE("adamw: zero grads and zero decay leave parameters unchanged") {
  ParamStore store(9);
  auto w = store.param("w", 2, 2);
  const Tensor before = w->data;
  store.zero_grads();
  AdamW opt(store, 0.1, 0.0);
  opt.step();
  for (int64_t i = 0; i < 4; ++i) CHECK(w->data.data[i] == before.data[i]);
}

TEST_CASE("adamw: single step on f(w) = w^2 decreases w") {
  ParamStore store(9);
  auto w = store.param("w", 1, 1, true);
  w->data.data[0] = 1.0;
  AdamW opt(store, 0.1, 0.0);
  store.zero_grads();
  backward(square(w));
  opt.step();
  CHECK(w->data.data[0] < 1.0);
  CHECK(w->data.data[0] > 0.5);
}

TEST_CASE("adamw: 200 steps reach the minimum of a 2-D quadratic") {
  ParamStore store(9);
  auto w = store.param("w", 1, 2, true);
  w->data.data[0] = 1.5;
  w->data.data[1] = -2.0;
  // f(w) = (w0 - 0.3)^2 + 2*(w1 + 0.7)^2
  Tensor target(1, 2);
  target.data[0] = 0.3;
  target.data[1] = -0.7;
  Tensor scale_vec(1, 2);
  scale_vec.data[0] = 1.0;
  scale_vec.data[1] = 2.0;
  AdamW opt(store, 0.05, 0.0);
  for (int step = 0; step < 200; ++step) {
    store.zero_grads();
    auto d = sub(w, constant(target));
    backward(sum_all(mul(constant(scale_vec), square(d))));
    opt.step();
  }
  CHECK(std::abs(w->data.data[0] - 0.3) < 1e-3);
  CHECK(std::abs(w->data.data[1] + 0.7) < 1e-3);
}

TEST_CASE("adamw: decoupled weight decay shrinks parameters without grads") {
  ParamStore store(9);
  auto w = store.param("w", 1, 1, true);
  w->data.data[0] = 2.0;
  AdamW opt(store, 0.1, 0.5);
  store.zero_grads();
  opt.step();
  CHECK(w->data.data[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
}
