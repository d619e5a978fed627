#pragma once

#include <string>
#include <vector>

#include "fblnet/config.hpp"
#include "fblnet/metrics.hpp"
#include "fblnet/tensor.hpp"

namespace fblnet {

struct Sample {
  Tensor<float> image;  // (3,S,S) in [0,1]
  Tensor<float> gt;     // (S,S), max-normalized to [0,1], max > 0
  FixationSet fix;
  std::string id;
};

struct Dataset {
  std::vector<Sample> samples;
  int side = 0;
  std::size_t size() const { return samples.size(); }
};

// Directory layout: root/frames/<id>.png + root/maps/<id>.png, optional
// root/fixations/<id>.txt with one "row col" pair per line in source-map
// pixel coordinates. All-zero maps are skipped with a warning.
Dataset load_dataset(const std::string& root, int side, double theta_fix);

struct SynthSpec {
  int n_samples = 0;
  int side = 0;
  int n_blobs = 3;
  double sigma_lo = 0.05;  // blob sigma as fraction of side
  double sigma_hi = 0.12;
  double theta_fix = 0.75;
};

// Textured background plus colored Gaussian blobs; the ground truth is a
// Gaussian at the blob nearest the vertical center line. Byte-identical for
// equal seeds regardless of n_samples.
Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed);

// Index batches for one epoch: deterministic shuffle given the rng, final
// partial batch included.
std::vector<std::vector<int>> epoch_batches(int n_samples, int batch_size, Rng& rng, bool shuffle);

}  // namespace fblnet
