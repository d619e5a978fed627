#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "fblnet/nn.hpp"
#include "fblnet/tensor.hpp"

namespace fblnet {

struct CheckpointMeta {
  int step = 0;
  std::uint64_t rng_state = 0;
  std::map<std::string, std::string> config_kv;
  std::map<std::string, double> metrics;  // snapshot at save time, e.g. val_cc
};

// Directory format: manifest.json (human-readable header: format tag,
// version, step, config echo, metric snapshot, rng state), index.json (one
// entry per tensor: name, dtype "f32", shape, byte offset, nbytes), and
// tensors.bin (raw little-endian float blobs packed in index order).
// Saving twice from the same state produces byte-identical files.
void save_checkpoint(const std::string& dir, const std::map<std::string, Tensor<float>>& tensors,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  std::map<std::string, Tensor<float>> tensors;
  CheckpointMeta meta;
};

// Validates the manifest schema and blob layout; any mismatch (format tag,
// version, dtype, offset gaps, file length) raises E_VERSION.
LoadedCheckpoint load_checkpoint(const std::string& dir);

// Collects every parameter and buffer into one named-tensor map.
std::map<std::string, Tensor<float>> snapshot_tensors(const ParamStore<float>& store);

// Writes matching entries back into the store. Every param/buffer must be
// present with its exact shape (E_VERSION otherwise); extra keys such as
// optimizer moments are left for the caller.
void restore_tensors(ParamStore<float>& store, const std::map<std::string, Tensor<float>>& tensors);

}  // namespace fblnet
