#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "fblnet/checkpoint.hpp"
#include "fblnet/model.hpp"
#include "test_util.hpp"

using namespace fblnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path root;
  TempDir(const std::string& tag) : root(fs::temp_directory_path() / ("fblnet_ckpt_" + tag)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempDir() { fs::remove_all(root); }
};

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.input_side = 32;
  c.base_width = 8;
  c.seed = 17;
  return c;
}

CheckpointMeta demo_meta() {
  CheckpointMeta meta;
  meta.step = 42;
  meta.rng_state = 991199;
  meta.config_kv = {{"input_side", "32"}, {"base_width", "8"}};
  meta.metrics = {{"val_cc", 0.31}, {"val_kldiv", 0.9}};
  return meta;
}

}  // namespace

TEST_CASE("checkpoint saves are byte-identical across a load cycle") {
  FblNet<float> net(tiny_cfg());
  // Move the state off its initialization so the roundtrip carries real data.
  Rng rng(5);
  Tensor<float> b_batch(Shape{2, 8, 8, 8});
  for (std::int64_t i = 0; i < b_batch.numel(); ++i)
    b_batch[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  net.knowledge.update(b_batch);

  TempDir t1("first"), t2("second");
  save_checkpoint(t1.root.string(), snapshot_tensors(net.store), demo_meta());

  LoadedCheckpoint lc = load_checkpoint(t1.root.string());
  CHECK(lc.meta.step == 42);
  CHECK(lc.meta.rng_state == 991199);
  CHECK(lc.meta.config_kv.at("base_width") == "8");
  CHECK(lc.meta.metrics.at("val_cc") == doctest::Approx(0.31));

  save_checkpoint(t2.root.string(), lc.tensors, lc.meta);
  for (const char* f : {"manifest.json", "index.json", "tensors.bin"}) {
    CAPTURE(f);
    CHECK(slurp(t1.root / f) == slurp(t2.root / f));
  }
}

TEST_CASE("restored stores reproduce the saved network exactly") {
  ModelConfig cfg = tiny_cfg();
  FblNet<float> net(cfg);
  Rng rng(5);
  Tensor<float> b_batch(Shape{2, 8, 8, 8});
  for (std::int64_t i = 0; i < b_batch.numel(); ++i)
    b_batch[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  net.knowledge.update(b_batch);
  net.knowledge.update(b_batch);

  TempDir tmp("exact");
  save_checkpoint(tmp.root.string(), snapshot_tensors(net.store), demo_meta());

  ModelConfig other = cfg;
  other.seed = 900;  // different init, must be fully overwritten
  FblNet<float> twin(other);
  restore_tensors(twin.store, load_checkpoint(tmp.root.string()).tensors);

  CHECK(max_abs_diff(twin.store.buffers.at("knowledge.K"), net.store.buffers.at("knowledge.K")) ==
        0.0);
  CHECK(twin.iteration() == 2);
  for (const auto& [name, p] : net.store.params)
    CHECK(max_abs_diff(twin.store.params.at(name)->value, p->value) == 0.0);

  net.set_train(false);
  twin.set_train(false);
  NoGradGuard ng;
  Tensor<float> img(Shape{1, 3, 32, 32});
  Rng irng(31);
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(irng.uniform(0.0, 1.0));
  CHECK(max_abs_diff(net.forward(img).A->value, twin.forward(img).A->value) == 0.0);
}

TEST_CASE("tampered checkpoints are rejected") {
  FblNet<float> net(tiny_cfg());
  TempDir tmp("tamper");
  save_checkpoint(tmp.root.string(), snapshot_tensors(net.store), demo_meta());

  SUBCASE("truncated tensor blob") {
    auto bytes = slurp(tmp.root / "tensors.bin");
    std::ofstream out(tmp.root / "tensors.bin", std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.root.string()), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("wrong format version") {
    auto text = slurp(tmp.root / "manifest.json");
    std::string s(text.begin(), text.end());
    auto pos = s.find("\"version\": 1");
    REQUIRE(pos != std::string::npos);
    s.replace(pos, 12, "\"version\": 9");
    std::ofstream(tmp.root / "manifest.json", std::ios::trunc) << s;
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.root.string()), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("wrong format tag") {
    auto text = slurp(tmp.root / "manifest.json");
    std::string s(text.begin(), text.end());
    auto pos = s.find("fblnet-ckpt");
    REQUIRE(pos != std::string::npos);
    s.replace(pos, 11, "fblnet-ckXt");
    std::ofstream(tmp.root / "manifest.json", std::ios::trunc) << s;
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.root.string()), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("broken offset chain") {
    auto text = slurp(tmp.root / "index.json");
    std::string s(text.begin(), text.end());
    auto pos = s.find("\"offset\": 0");
    REQUIRE(pos != std::string::npos);
    s.replace(pos, 11, "\"offset\": 4");
    std::ofstream(tmp.root / "index.json", std::ios::trunc) << s;
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.root.string()), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("unparseable manifest") {
    std::ofstream(tmp.root / "manifest.json", std::ios::trunc) << "{not json";
    CHECK_THROWS_WITH_AS(load_checkpoint(tmp.root.string()), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_checkpoint((tmp.root / "nope").string()), FblError);
  }
}

TEST_CASE("restore rejects incomplete or mismatched tensor sets") {
  FblNet<float> net(tiny_cfg());
  auto tensors = snapshot_tensors(net.store);

  SUBCASE("missing parameter") {
    tensors.erase("decoder.head.w");
    FblNet<float> twin(tiny_cfg());
    CHECK_THROWS_WITH_AS(restore_tensors(twin.store, tensors), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("missing buffer") {
    tensors.erase("knowledge.K");
    FblNet<float> twin(tiny_cfg());
    CHECK_THROWS_WITH_AS(restore_tensors(twin.store, tensors), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("shape mismatch") {
    tensors["decoder.head.w"] = Tensor<float>(Shape{1, 3, 1, 1}, 0.0f);
    FblNet<float> twin(tiny_cfg());
    CHECK_THROWS_WITH_AS(restore_tensors(twin.store, tensors), doctest::Contains("E_VERSION"),
                         FblError);
  }
  SUBCASE("extra keys are tolerated") {
    tensors["optim.m.decoder.head.w"] = Tensor<float>(Shape{4}, 0.0f);
    FblNet<float> twin(tiny_cfg());
    restore_tensors(twin.store, tensors);
    CHECK(max_abs_diff(twin.store.params.at("decoder.head.w")->value,
                       net.store.params.at("decoder.head.w")->value) == 0.0);
  }
}
