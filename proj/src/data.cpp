#include "fblnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "fblnet/autodiff.hpp"
#include "fblnet/errors.hpp"
#include "fblnet/image_io.hpp"

namespace fs = std::filesystem;

namespace fblnet {

namespace {

Tensor<float> resize_rgb(const Tensor<float>& img, int side) {
  if (img.dim(1) == side && img.dim(2) == side) return img;
  return detail::bilinear_resize_plain(img, side, side);
}

Tensor<float> resize_gray(const Tensor<float>& img, int side) {
  if (img.dim(0) == side && img.dim(1) == side) return img;
  Tensor<float> as3 = img.reshaped(Shape{1, img.dim(0), img.dim(1)});
  return detail::bilinear_resize_plain(as3, side, side).reshaped(Shape{side, side});
}

// returns false for an all-zero map instead of normalizing
bool max_normalize(Tensor<float>& m) {
  float mx = 0.f;
  for (std::int64_t i = 0; i < m.numel(); ++i) mx = std::max(mx, m[i]);
  if (mx <= 0.f) return false;
  for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = std::max(0.f, m[i]) / mx;
  return true;
}

FixationSet derive_fixations(const Tensor<float>& gt, double theta_fix) {
  return fixations_from_map(gt.cast<double>(), theta_fix);
}

// Explicit fixation files carry source-map coordinates; scale them onto the
// S x S grid and drop duplicates.
FixationSet read_fixation_file(const std::string& path, int src_h, int src_w, int side) {
  std::ifstream in(path);
  FBL_CHECK(in.good(), Err::Io, "cannot open fixation file " + path);
  FixationSet fix;
  fix.h = side;
  fix.w = side;
  std::set<std::pair<int, int>> seen;
  int r = 0, c = 0;
  while (in >> r >> c) {
    FBL_CHECK(r >= 0 && r < src_h && c >= 0 && c < src_w, Err::Domain,
              "fixation out of bounds in " + path);
    int rr = static_cast<int>(static_cast<std::int64_t>(r) * side / src_h);
    int cc = static_cast<int>(static_cast<std::int64_t>(c) * side / src_w);
    if (seen.insert({rr, cc}).second) fix.points.emplace_back(rr, cc);
  }
  FBL_CHECK(in.eof(), Err::Io, "malformed fixation file " + path);
  return fix;
}

}  // namespace

Dataset load_dataset(const std::string& root, int side, double theta_fix) {
  fs::path frames = fs::path(root) / "frames";
  fs::path maps = fs::path(root) / "maps";
  fs::path fixdir = fs::path(root) / "fixations";
  FBL_CHECK(fs::is_directory(frames), Err::Io, "missing directory " + frames.string());
  FBL_CHECK(fs::is_directory(maps), Err::Io, "missing directory " + maps.string());

  std::set<std::string> frame_ids, map_ids;
  for (const auto& e : fs::directory_iterator(frames))
    if (e.path().extension() == ".png") frame_ids.insert(e.path().stem().string());
  for (const auto& e : fs::directory_iterator(maps))
    if (e.path().extension() == ".png") map_ids.insert(e.path().stem().string());
  for (const auto& id : frame_ids)
    FBL_CHECK(map_ids.count(id), Err::MissingPair, "frame '" + id + "' has no map");
  for (const auto& id : map_ids)
    FBL_CHECK(frame_ids.count(id), Err::MissingPair, "map '" + id + "' has no frame");

  Dataset ds;
  ds.side = side;
  for (const auto& id : frame_ids) {
    Tensor<float> map_src = read_png_gray((maps / (id + ".png")).string());
    int src_h = map_src.dim(0), src_w = map_src.dim(1);
    Tensor<float> gt = resize_gray(map_src, side);
    if (!max_normalize(gt)) {
      std::cerr << "warning: skipping '" << id << "': attention map is all zero\n";
      continue;
    }
    Sample s;
    s.id = id;
    s.image = resize_rgb(read_png_rgb((frames / (id + ".png")).string()), side);
    for (std::int64_t i = 0; i < s.image.numel(); ++i)
      s.image[i] = std::clamp(s.image[i], 0.f, 1.f);
    s.gt = std::move(gt);
    fs::path fixfile = fixdir / (id + ".txt");
    s.fix = fs::is_regular_file(fixfile) ? read_fixation_file(fixfile.string(), src_h, src_w, side)
                                         : derive_fixations(s.gt, theta_fix);
    FBL_CHECK(!s.fix.points.empty(), Err::EmptyFix, "sample '" + id + "' has no fixations");
    ds.samples.push_back(std::move(s));
  }
  FBL_CHECK(!ds.samples.empty(), Err::EmptyDataset, "no usable samples under " + root);
  return ds;
}

Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  FBL_CHECK(spec.n_samples >= 1, Err::Config, "synth_generate needs n_samples >= 1");
  FBL_CHECK(spec.side >= 8, Err::Config, "synthetic side too small");
  const int S = spec.side;
  Dataset ds;
  ds.side = S;
  ds.samples.reserve(static_cast<std::size_t>(spec.n_samples));

  for (int i = 0; i < spec.n_samples; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05d", i);
    s.id = buf;

    // coarse textured background, upsampled 8x8 noise per channel
    Tensor<float> coarse(Shape{3, 8, 8});
    for (std::int64_t j = 0; j < coarse.numel(); ++j)
      coarse[j] = 0.1f + 0.4f * static_cast<float>(rng.uniform());
    s.image = detail::bilinear_resize_plain(coarse, S, S);

    struct Blob {
      double cy, cx, sigma, amp;
      float rgb[3];
    };
    std::vector<Blob> blobs(static_cast<std::size_t>(spec.n_blobs));
    for (auto& b : blobs) {
      b.cy = rng.uniform(0.1 * S, 0.9 * S);
      b.cx = rng.uniform(0.1 * S, 0.9 * S);
      b.sigma = rng.uniform(spec.sigma_lo * S, spec.sigma_hi * S);
      b.amp = rng.uniform(0.6, 1.0);
      for (float& c : b.rgb) c = static_cast<float>(rng.uniform(0.5, 1.0));
    }
    for (const auto& b : blobs) {
      double inv2s2 = 1.0 / (2.0 * b.sigma * b.sigma);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double d2 = (y - b.cy) * (y - b.cy) + (x - b.cx) * (x - b.cx);
          float g = static_cast<float>(b.amp * std::exp(-d2 * inv2s2));
          for (int c = 0; c < 3; ++c) {
            float& px = s.image[(static_cast<std::int64_t>(c) * S + y) * S + x];
            px = std::min(1.0f, px + g * b.rgb[c]);
          }
        }
    }

    // attended blob: nearest to the vertical center line
    std::size_t best = 0;
    for (std::size_t j = 1; j < blobs.size(); ++j)
      if (std::abs(blobs[j].cx - S / 2.0) < std::abs(blobs[best].cx - S / 2.0)) best = j;
    const Blob& a = blobs[best];
    s.gt = Tensor<float>(Shape{S, S});
    double inv2s2 = 1.0 / (2.0 * a.sigma * a.sigma);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double d2 = (y - a.cy) * (y - a.cy) + (x - a.cx) * (x - a.cx);
        s.gt.at(y, x) = static_cast<float>(std::exp(-d2 * inv2s2));
      }
    FBL_CHECK(max_normalize(s.gt), Err::ZeroMap, "synthetic ground truth degenerate");
    s.fix = derive_fixations(s.gt, spec.theta_fix);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<std::vector<int>> epoch_batches(int n_samples, int batch_size, Rng& rng, bool shuffle) {
  FBL_CHECK(n_samples >= 1, Err::EmptyDataset, "no samples to batch");
  FBL_CHECK(batch_size >= 1, Err::Config, "batch_size must be at least 1");
  std::vector<int> order(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) order[static_cast<std::size_t>(i)] = i;
  if (shuffle) rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int at = 0; at < n_samples; at += batch_size) {
    int end = std::min(n_samples, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

}  // namespace fblnet
