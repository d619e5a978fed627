#include "fblnet/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "fblnet/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fblnet {

namespace {

constexpr const char* kFormat = "fblnet-ckpt";
constexpr int kVersion = 1;

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  FBL_CHECK(out.good(), Err::Io, "cannot write " + p.string());
  out << text;
  FBL_CHECK(out.good(), Err::Io, "short write to " + p.string());
}

json read_json(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  FBL_CHECK(in.good(), Err::Io, "cannot read " + p.string());
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  FBL_CHECK(!j.is_discarded(), Err::Version, "malformed JSON in " + p.string());
  return j;
}

}  // namespace

void save_checkpoint(const std::string& dir, const std::map<std::string, Tensor<float>>& tensors,
                     const CheckpointMeta& meta) {
  fs::create_directories(dir);

  json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["step"] = meta.step;
  manifest["rng_state"] = std::to_string(meta.rng_state);
  manifest["config"] = meta.config_kv;
  manifest["metrics"] = meta.metrics;
  manifest["tensor_count"] = tensors.size();
  write_text(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");

  json index = json::array();
  std::int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    std::int64_t nbytes = t.numel() * static_cast<std::int64_t>(sizeof(float));
    index.push_back({{"name", name},
                     {"dtype", "f32"},
                     {"shape", t.shape()},
                     {"offset", offset},
                     {"nbytes", nbytes}});
    offset += nbytes;
  }
  write_text(fs::path(dir) / "index.json", index.dump(2) + "\n");

  std::ofstream bin(fs::path(dir) / "tensors.bin", std::ios::binary | std::ios::trunc);
  FBL_CHECK(bin.good(), Err::Io, "cannot write tensors.bin under " + dir);
  for (const auto& [name, t] : tensors)
    bin.write(reinterpret_cast<const char*>(t.data()),
              t.numel() * static_cast<std::streamsize>(sizeof(float)));
  FBL_CHECK(bin.good(), Err::Io, "short write to tensors.bin under " + dir);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  json manifest = read_json(fs::path(dir) / "manifest.json");
  FBL_CHECK(manifest.value("format", "") == kFormat, Err::Version,
            "not a checkpoint manifest: " + dir);
  FBL_CHECK(manifest.value("version", -1) == kVersion, Err::Version,
            "unsupported checkpoint version in " + dir);

  LoadedCheckpoint out;
  out.meta.step = manifest.value("step", 0);
  out.meta.rng_state = std::stoull(manifest.value("rng_state", "0"));
  if (manifest.contains("config"))
    out.meta.config_kv = manifest["config"].get<std::map<std::string, std::string>>();
  if (manifest.contains("metrics"))
    out.meta.metrics = manifest["metrics"].get<std::map<std::string, double>>();

  json index = read_json(fs::path(dir) / "index.json");
  FBL_CHECK(index.is_array(), Err::Version, "index.json is not an array in " + dir);

  fs::path binpath = fs::path(dir) / "tensors.bin";
  FBL_CHECK(fs::is_regular_file(binpath), Err::Version, "missing tensors.bin in " + dir);
  std::int64_t file_size = static_cast<std::int64_t>(fs::file_size(binpath));
  std::ifstream bin(binpath, std::ios::binary);
  FBL_CHECK(bin.good(), Err::Io, "cannot read " + binpath.string());

  std::int64_t expect_offset = 0;
  for (const auto& e : index) {
    FBL_CHECK(e.contains("name") && e.contains("dtype") && e.contains("shape") &&
                  e.contains("offset") && e.contains("nbytes"),
              Err::Version, "incomplete index entry in " + dir);
    FBL_CHECK(e["dtype"] == "f32", Err::Version, "unsupported dtype in " + dir);
    std::string name = e["name"];
    Shape shape = e["shape"].get<Shape>();
    std::int64_t offset = e["offset"];
    std::int64_t nbytes = e["nbytes"];
    FBL_CHECK(offset == expect_offset, Err::Version, "blob offset gap at '" + name + "'");
    FBL_CHECK(nbytes == shape_numel(shape) * static_cast<std::int64_t>(sizeof(float)), Err::Version,
              "blob size does not match shape for '" + name + "'");
    Tensor<float> t(shape);
    bin.read(reinterpret_cast<char*>(t.data()), nbytes);
    FBL_CHECK(bin.gcount() == nbytes, Err::Version, "truncated blob for '" + name + "'");
    FBL_CHECK(out.tensors.emplace(name, std::move(t)).second, Err::Version,
              "duplicate tensor '" + name + "'");
    expect_offset += nbytes;
  }
  FBL_CHECK(expect_offset == file_size, Err::Version,
            "tensors.bin length mismatch in " + dir);
  return out;
}

std::map<std::string, Tensor<float>> snapshot_tensors(const ParamStore<float>& store) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [name, p] : store.params) out.emplace(name, p->value);
  for (const auto& [name, b] : store.buffers) out.emplace(name, b);
  return out;
}

void restore_tensors(ParamStore<float>& store, const std::map<std::string, Tensor<float>>& tensors) {
  for (auto& [name, p] : store.params) {
    auto it = tensors.find(name);
    FBL_CHECK(it != tensors.end(), Err::Version, "checkpoint missing parameter '" + name + "'");
    FBL_CHECK(it->second.shape() == p->value.shape(), Err::Version,
              "shape mismatch for '" + name + "'");
    p->value = it->second;
  }
  for (auto& [name, b] : store.buffers) {
    auto it = tensors.find(name);
    FBL_CHECK(it != tensors.end(), Err::Version, "checkpoint missing buffer '" + name + "'");
    FBL_CHECK(it->second.shape() == b.shape(), Err::Version, "shape mismatch for '" + name + "'");
    b = it->second;
  }
}

}  // namespace fblnet
