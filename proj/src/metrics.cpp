#include "fblnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fblnet/errors.hpp"

namespace fblnet {

namespace {

void check_grid(const Tensor<double>& m, const char* who) {
  FBL_CHECK(m.rank() == 2, Err::Shape, std::string(who) + " expects an H x W grid, got " + shape_str(m.shape()));
}

void check_same(const Tensor<double>& p, const Tensor<double>& q, const char* who) {
  check_grid(p, who);
  FBL_CHECK(same_shape(p, q), Err::Shape,
            std::string(who) + ": shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
}

double sum(const Tensor<double>& m) {
  double s = 0;
  for (std::int64_t i = 0; i < m.numel(); ++i) s += m[i];
  return s;
}

void check_normalized(const Tensor<double>& m, const char* who) {
  FBL_CHECK(std::abs(sum(m) - 1.0) <= 1e-6, Err::NotNormalized,
            std::string(who) + ": map does not sum to 1");
}

struct Moments {
  double mean = 0, stddev = 0;
};

Moments moments(const Tensor<double>& m) {
  std::int64_t n = m.numel();
  double mu = sum(m) / static_cast<double>(n);
  double v = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    double d = m[i] - mu;
    v += d * d;
  }
  return {mu, std::sqrt(v / static_cast<double>(n))};
}

// Exact constancy test; the accumulated stddev of a constant map can come out
// as a tiny nonzero value, so comparing it against 0 is not reliable.
bool is_constant(const Tensor<double>& m) {
  for (std::int64_t i = 1; i < m.numel(); ++i)
    if (m[i] != m[0]) return false;
  return true;
}

void check_fix(const FixationSet& fix, const Tensor<double>& p, const char* who) {
  FBL_CHECK(!fix.points.empty(), Err::EmptyFix, std::string(who) + ": no fixations");
  FBL_CHECK(fix.h == p.dim(0) && fix.w == p.dim(1), Err::Shape,
            std::string(who) + ": fixation frame does not match map");
  for (auto [r, c] : fix.points)
    FBL_CHECK(r >= 0 && r < fix.h && c >= 0 && c < fix.w, Err::Shape,
              std::string(who) + ": fixation out of bounds");
}

// Shared ROC convention: pixels with value >= threshold count as positive
// responses; curve points at the given thresholds plus (0,0) and (1,1),
// integrated by trapezoid. A constant map lands at exactly 0.5.
double roc_area(const std::vector<double>& pos, const std::vector<double>& neg,
                std::vector<double> thresholds) {
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<double> ps = pos, ns = neg;
  std::sort(ps.begin(), ps.end(), std::greater<>());
  std::sort(ns.begin(), ns.end(), std::greater<>());
  double area = 0, prev_fpr = 0, prev_tpr = 0;
  std::size_t ip = 0, in = 0;
  for (double t : thresholds) {
    while (ip < ps.size() && ps[ip] >= t) ++ip;
    while (in < ns.size() && ns[in] >= t) ++in;
    double tpr = static_cast<double>(ip) / static_cast<double>(ps.size());
    double fpr = static_cast<double>(in) / static_cast<double>(ns.size());
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  area += (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2.0;
  return area;
}

}  // namespace

Tensor<double> normalize_dist(const Tensor<double>& m) {
  check_grid(m, "normalize_dist");
  double s = 0;
  for (std::int64_t i = 0; i < m.numel(); ++i) {
    FBL_CHECK(m[i] >= 0, Err::Domain, "normalize_dist: negative entry");
    s += m[i];
  }
  FBL_CHECK(s > 0, Err::ZeroMap, "normalize_dist: map sums to zero");
  Tensor<double> out = m;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= s;
  return out;
}

double cc(const Tensor<double>& p, const Tensor<double>& q) {
  check_same(p, q, "cc");
  FBL_CHECK(!is_constant(p) && !is_constant(q), Err::ConstMap,
            "cc: constant map has no correlation");
  auto [mp, sp] = moments(p);
  auto [mq, sq] = moments(q);
  FBL_CHECK(sp > 0 && sq > 0, Err::ConstMap, "cc: constant map has no correlation");
  double cov = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) cov += (p[i] - mp) * (q[i] - mq);
  cov /= static_cast<double>(p.numel());
  return cov / (sp * sq);
}

double kldiv(const Tensor<double>& p, const Tensor<double>& q, double epsilon) {
  check_same(p, q, "kldiv");
  check_normalized(p, "kldiv(P)");
  check_normalized(q, "kldiv(Q)");
  double r = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i)
    r += q[i] * std::log(epsilon + q[i] / (epsilon + p[i]));
  return r;
}

double sim(const Tensor<double>& p, const Tensor<double>& q) {
  check_same(p, q, "sim");
  check_normalized(p, "sim(P)");
  check_normalized(q, "sim(Q)");
  double r = 0;
  for (std::int64_t i = 0; i < p.numel(); ++i) r += std::min(p[i], q[i]);
  return r;
}

double nss(const Tensor<double>& p, const FixationSet& fix) {
  check_grid(p, "nss");
  check_fix(fix, p, "nss");
  FBL_CHECK(!is_constant(p), Err::ConstMap, "nss: constant map cannot be z-scored");
  auto [mu, sd] = moments(p);
  FBL_CHECK(sd > 0, Err::ConstMap, "nss: constant map cannot be z-scored");
  double acc = 0;
  for (auto [r, c] : fix.points) acc += (p.at(r, c) - mu) / sd;
  return acc / static_cast<double>(fix.points.size());
}

double auc_judd(const Tensor<double>& p, const FixationSet& fix) {
  check_grid(p, "auc_judd");
  check_fix(fix, p, "auc_judd");
  FBL_CHECK(static_cast<std::int64_t>(fix.points.size()) < p.numel(), Err::Domain,
            "auc_judd: fixations cover every pixel, no negatives left");
  std::vector<char> is_fix(static_cast<std::size_t>(p.numel()), 0);
  for (auto [r, c] : fix.points) is_fix[static_cast<std::size_t>(r) * p.dim(1) + c] = 1;
  std::vector<double> pos, neg;
  pos.reserve(fix.points.size());
  neg.reserve(static_cast<std::size_t>(p.numel()) - fix.points.size());
  for (std::int64_t i = 0; i < p.numel(); ++i) (is_fix[static_cast<std::size_t>(i)] ? pos : neg).push_back(p[i]);
  return roc_area(pos, neg, pos);
}

double auc_borji(const Tensor<double>& p, const FixationSet& fix, int n_splits,
                 std::uint64_t rng_seed) {
  check_grid(p, "auc_borji");
  check_fix(fix, p, "auc_borji");
  FBL_CHECK(n_splits >= 1, Err::Domain, "auc_borji: n_splits must be at least 1");
  std::vector<char> is_fix(static_cast<std::size_t>(p.numel()), 0);
  for (auto [r, c] : fix.points) is_fix[static_cast<std::size_t>(r) * p.dim(1) + c] = 1;
  std::vector<double> pos, non_fix_vals;
  for (std::int64_t i = 0; i < p.numel(); ++i)
    (is_fix[static_cast<std::size_t>(i)] ? pos : non_fix_vals).push_back(p[i]);
  FBL_CHECK(!non_fix_vals.empty(), Err::Domain, "auc_borji: no negatives available");
  std::size_t k = std::min(pos.size(), non_fix_vals.size());
  double acc = 0;
  for (int s = 0; s < n_splits; ++s) {
    Rng rng = Rng::derive(rng_seed, static_cast<std::uint64_t>(s));
    std::vector<std::size_t> pick = rng.sample_without_replacement(non_fix_vals.size(), k);
    std::vector<double> neg;
    neg.reserve(k);
    for (std::size_t j : pick) neg.push_back(non_fix_vals[j]);
    acc += roc_area(pos, neg, pos);
  }
  return acc / static_cast<double>(n_splits);
}

FixationSet fixations_from_map(const Tensor<double>& q, double theta_fix) {
  check_grid(q, "fixations_from_map");
  FBL_CHECK(theta_fix > 0 && theta_fix <= 1, Err::Domain, "theta_fix outside (0,1]");
  double mx = q[0];
  for (std::int64_t i = 1; i < q.numel(); ++i) mx = std::max(mx, q[i]);
  FBL_CHECK(mx > 0, Err::ZeroMap, "fixations_from_map: map max is not positive");
  FixationSet fix;
  fix.h = q.dim(0);
  fix.w = q.dim(1);
  double cut = theta_fix * mx;
  for (int r = 0; r < fix.h; ++r)
    for (int c = 0; c < fix.w; ++c)
      if (q.at(r, c) >= cut) fix.points.emplace_back(r, c);
  return fix;
}

FrameMetrics mean_metrics(const std::vector<FrameMetrics>& rows) {
  FBL_CHECK(!rows.empty(), Err::EmptyDataset, "mean_metrics: no rows");
  FrameMetrics m;
  m.id = "mean";
  for (const auto& r : rows) {
    m.auc_j += r.auc_j;
    m.auc_b += r.auc_b;
    m.sim += r.sim;
    m.cc += r.cc;
    m.kldiv += r.kldiv;
    m.nss += r.nss;
  }
  double n = static_cast<double>(rows.size());
  m.auc_j /= n;
  m.auc_b /= n;
  m.sim /= n;
  m.cc /= n;
  m.kldiv /= n;
  m.nss /= n;
  return m;
}

std::string format_report(const std::vector<FrameMetrics>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "frame\tAUC_J\tAUC_B\tSIM\tCC\tKldiv\tNSS\n";
  auto emit = [&out](const FrameMetrics& r) {
    out << r.id << '\t' << r.auc_j << '\t' << r.auc_b << '\t' << r.sim << '\t' << r.cc << '\t'
        << r.kldiv << '\t' << r.nss << '\n';
  };
  for (const auto& r : rows) emit(r);
  emit(mean_metrics(rows));
  return out.str();
}

void write_report(const std::string& path, const std::vector<FrameMetrics>& rows) {
  std::ofstream out(path);
  FBL_CHECK(out.good(), Err::Io, "cannot write report " + path);
  out << format_report(rows);
  FBL_CHECK(out.good(), Err::Io, "failed writing report " + path);
}

}  // namespace fblnet
