#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fblnet/rng.hpp"
#include "fblnet/tensor.hpp"

namespace fblnet {

// Integer pixel coordinates of fixated locations, row-major frame.
struct FixationSet {
  std::vector<std::pair<int, int>> points;  // (row, col)
  int h = 0, w = 0;

  std::vector<std::int64_t> flat_indices() const {
    std::vector<std::int64_t> idx;
    idx.reserve(points.size());
    for (auto [r, c] : points) idx.push_back(static_cast<std::int64_t>(r) * w + c);
    return idx;
  }
};

// All metric maps are rank-2 (H,W) double grids.
Tensor<double> normalize_dist(const Tensor<double>& m);
double cc(const Tensor<double>& p, const Tensor<double>& q);
double kldiv(const Tensor<double>& p, const Tensor<double>& q, double epsilon);
double sim(const Tensor<double>& p, const Tensor<double>& q);
double nss(const Tensor<double>& p, const FixationSet& fix);
double auc_judd(const Tensor<double>& p, const FixationSet& fix);
double auc_borji(const Tensor<double>& p, const FixationSet& fix, int n_splits,
                 std::uint64_t rng_seed);
FixationSet fixations_from_map(const Tensor<double>& q, double theta_fix);

struct FrameMetrics {
  std::string id;
  double auc_j = 0, auc_b = 0, sim = 0, cc = 0, kldiv = 0, nss = 0;
};

FrameMetrics mean_metrics(const std::vector<FrameMetrics>& rows);
std::string format_report(const std::vector<FrameMetrics>& rows);
void write_report(const std::string& path, const std::vector<FrameMetrics>& rows);

}  // namespace fblnet
