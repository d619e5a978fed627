#include "fblnet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fblnet/image_io.hpp"
#include "fblnet/loss.hpp"

namespace fs = std::filesystem;

namespace fblnet {

void Adam::step(ParamStore<float>& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, t_);
  const double bc2 = 1.0 - std::pow(b2_, t_);
  for (auto& [name, p] : store.params) {
    if (p->grad.empty()) continue;  // parameter never entered the graph
    Tensor<float>& w = p->value;
    const Tensor<float>& g = p->grad;
    auto mit = m_.find(name);
    if (mit == m_.end()) {
      mit = m_.emplace(name, Tensor<float>(w.shape(), 0.f)).first;
      v_.emplace(name, Tensor<float>(w.shape(), 0.f));
    }
    Tensor<float>& m = mit->second;
    Tensor<float>& v = v_.at(name);
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      double gi = static_cast<double>(g[i]) + wd_ * static_cast<double>(w[i]);
      double mi = b1_ * m[i] + (1.0 - b1_) * gi;
      double vi = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      w[i] -= static_cast<float>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
    }
  }
}

std::map<std::string, Tensor<float>> Adam::state_tensors() const {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [name, t] : m_) out.emplace("optim.m." + name, t);
  for (const auto& [name, t] : v_) out.emplace("optim.v." + name, t);
  return out;
}

void Adam::load_state(const std::map<std::string, Tensor<float>>& tensors) {
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : tensors) {
    if (name.rfind("optim.m.", 0) == 0) m_.emplace(name.substr(8), t);
    else if (name.rfind("optim.v.", 0) == 0) v_.emplace(name.substr(8), t);
  }
}

Trainer::Trainer(const ModelConfig& cfg)
    : cfg_(validate_config(cfg)), model_(cfg_), opt_(cfg_.lr, cfg_.weight_decay) {}

std::unique_ptr<Trainer> Trainer::from_checkpoint(const std::string& dir) {
  LoadedCheckpoint lc = load_checkpoint(dir);
  ModelConfig cfg = config_from_kv(lc.meta.config_kv);
  auto tr = std::make_unique<Trainer>(cfg);
  restore_tensors(tr->model_.store, lc.tensors);
  tr->opt_.load_state(lc.tensors);
  tr->step_ = lc.meta.step;
  tr->opt_.set_t(lc.meta.step);
  return tr;
}

namespace {

Tensor<float> gather_images(const Dataset& ds, const std::vector<int>& idx, int S) {
  Tensor<float> images(Shape{static_cast<int>(idx.size()), 3, S, S});
  const std::int64_t per = 3ll * S * S;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const Sample& s = ds.samples[static_cast<std::size_t>(idx[n])];
    FBL_CHECK(s.image.numel() == per, Err::Shape,
              "sample '" + s.id + "' does not match the configured input side");
    std::copy(s.image.data(), s.image.data() + per,
              images.data() + static_cast<std::int64_t>(n) * per);
  }
  return images;
}

Tensor<double> slice_map(const Tensor<float>& a, int n, int S) {
  Tensor<double> out(Shape{S, S});
  const float* src = a.data() + static_cast<std::int64_t>(n) * S * S;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<double>(src[i]);
  return out;
}

std::map<std::string, double> metric_snapshot(const FrameMetrics& m, double train_loss) {
  return {{"val_auc_j", m.auc_j}, {"val_auc_b", m.auc_b}, {"val_sim", m.sim},
          {"val_cc", m.cc},       {"val_kldiv", m.kldiv}, {"val_nss", m.nss},
          {"train_loss", train_loss}};
}

}  // namespace

float Trainer::train_step(const Dataset& ds, const std::vector<int>& batch) {
  FBL_CHECK(!batch.empty(), Err::EmptyDataset, "train_step: empty batch");
  model_.set_train(true);
  const int S = cfg_.input_side;
  const int B = static_cast<int>(batch.size());

  model_.store.zero_grad();
  Tensor<float> images = gather_images(ds, batch, S);
  Intermediates<float> inter = model_.forward(images);

  LossWeights lw{cfg_.mu, cfg_.eta, cfg_.xi};
  Var<float> total;
  for (int n = 0; n < B; ++n) {
    const Sample& s = ds.samples[static_cast<std::size_t>(batch[static_cast<std::size_t>(n)])];
    Var<float> p = reshape(select_batch(inter.A, n), Shape{S * S});
    Var<float> l = saliency_loss(p, s.gt.reshaped(Shape{S * S}), s.fix.flat_indices(), lw,
                                 cfg_.epsilon_kl);
    total = n ? add(total, l) : l;
  }
  Var<float> loss = mul_scalar(total, 1.f / static_cast<float>(B));

  float lv = loss->value[0];
  if (!std::isfinite(lv)) {
    std::cerr << "diagnostics at step " << step_ << ": loss=" << lv << "\n";
    const Tensor<float>& A = inter.A->value;
    float mn = A[0], mx = A[0];
    for (std::int64_t i = 0; i < A.numel(); ++i) {
      mn = std::min(mn, A[i]);
      mx = std::max(mx, A[i]);
    }
    std::cerr << "  output range [" << mn << ", " << mx << "]\n";
    for (const auto& [name, p] : model_.store.params)
      if (!p->value.all_finite()) std::cerr << "  non-finite parameter: " << name << "\n";
    for (const auto& [name, b] : model_.store.buffers)
      if (!b.all_finite()) std::cerr << "  non-finite buffer: " << name << "\n";
    throw FblError(Err::NanLoss, "training loss is not finite at step " + std::to_string(step_));
  }

  backward(loss);
  opt_.step(model_.store);
  if (cfg_.fusion_mode == FusionMode::fbl) model_.update_knowledge_from(inter);
  ++step_;
  return lv;
}

TrainResult Trainer::train(const Dataset& train_ds, const Dataset& val_ds,
                           const std::string& out_dir, bool shuffle,
                           const std::function<void(int, float)>& on_step) {
  FBL_CHECK(!train_ds.samples.empty(), Err::EmptyDataset, "train: empty training set");
  const int n = static_cast<int>(train_ds.size());
  const int bpe = (n + cfg_.batch_size - 1) / cfg_.batch_size;
  TrainResult res;
  double last_loss = 0;
  FrameMetrics last_val;
  bool have_val = false;

  while (step_ < cfg_.steps) {
    // Epoch order is a pure function of (seed, epoch), so resuming from a
    // checkpoint replays the identical data stream.
    const int epoch = step_ / bpe;
    const int pos = step_ % bpe;
    Rng erng = Rng::derive(cfg_.seed, 0xE0000000ull + static_cast<std::uint64_t>(epoch));
    auto batches = epoch_batches(n, cfg_.batch_size, erng, shuffle);
    for (std::size_t i = static_cast<std::size_t>(pos); i < batches.size() && step_ < cfg_.steps;
         ++i) {
      last_loss = train_step(train_ds, batches[i]);
      if (on_step) on_step(step_, static_cast<float>(last_loss));
      const bool val_now = !val_ds.samples.empty() && cfg_.val_every > 0 &&
                           (step_ % cfg_.val_every == 0 || step_ == cfg_.steps);
      if (val_now) {
        EvalResult ev = evaluate(val_ds);
        last_val = ev.mean;
        have_val = true;
        if (res.best_step < 0 || ev.mean.cc > res.best_val.cc) {
          res.best_step = step_;
          res.best_val = ev.mean;
          if (!out_dir.empty()) {
            res.best_dir = (fs::path(out_dir) / "best").string();
            save(res.best_dir, metric_snapshot(ev.mean, last_loss));
          }
        }
      }
    }
  }

  res.final_loss = last_loss;
  if (!out_dir.empty()) {
    res.last_dir = (fs::path(out_dir) / "last").string();
    save(res.last_dir, have_val ? metric_snapshot(last_val, last_loss)
                                : std::map<std::string, double>{{"train_loss", last_loss}});
  }
  return res;
}

EvalResult Trainer::evaluate(const Dataset& ds) {
  FBL_CHECK(!ds.samples.empty(), Err::EmptyDataset, "evaluate: empty dataset");
  const bool was_training = model_.is_training();
  model_.set_train(false);
  EvalResult out;
  {
    NoGradGuard ng;
    const int S = cfg_.input_side;
    const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg_.batch_size));
    for (std::size_t at = 0; at < ds.samples.size(); at += bs) {
      const std::size_t end = std::min(ds.samples.size(), at + bs);
      std::vector<int> idx;
      for (std::size_t i = at; i < end; ++i) idx.push_back(static_cast<int>(i));
      Intermediates<float> inter = model_.forward(gather_images(ds, idx, S));
      for (std::size_t i = at; i < end; ++i) {
        const Sample& s = ds.samples[i];
        Tensor<double> pred = slice_map(inter.A->value, static_cast<int>(i - at), S);
        out.frames.push_back(eval_frame_metrics(s.id, pred, s.gt.cast<double>(), s.fix,
                                                cfg_.borji_splits, frame_seed(cfg_.seed, i),
                                                cfg_.epsilon_kl));
      }
    }
  }
  out.mean = mean_metrics(out.frames);
  model_.set_train(was_training);
  return out;
}

void Trainer::save(const std::string& dir, const std::map<std::string, double>& metric_snapshot) {
  std::map<std::string, Tensor<float>> tensors = snapshot_tensors(model_.store);
  for (auto& [name, t] : opt_.state_tensors()) tensors.emplace(name, std::move(t));
  CheckpointMeta meta;
  meta.step = step_;
  meta.rng_state = cfg_.seed;
  meta.config_kv = config_to_kv(cfg_);
  meta.metrics = metric_snapshot;
  save_checkpoint(dir, tensors, meta);
}

void Trainer::load(const std::string& dir) {
  LoadedCheckpoint lc = load_checkpoint(dir);
  restore_tensors(model_.store, lc.tensors);
  opt_.load_state(lc.tensors);
  step_ = lc.meta.step;
  opt_.set_t(lc.meta.step);
}

FrameMetrics eval_frame_metrics(const std::string& id, const Tensor<double>& pred,
                                const Tensor<double>& gt, const FixationSet& fix,
                                int borji_splits, std::uint64_t borji_seed, double epsilon_kl) {
  Tensor<double> pn = normalize_dist(pred);
  Tensor<double> qn = normalize_dist(gt);
  FrameMetrics m;
  m.id = id;
  m.auc_j = auc_judd(pred, fix);
  m.auc_b = auc_borji(pred, fix, borji_splits, borji_seed);
  m.sim = sim(pn, qn);
  m.cc = cc(pred, gt);
  m.kldiv = kldiv(pn, qn, epsilon_kl);
  m.nss = nss(pred, fix);
  return m;
}

std::uint64_t frame_seed(std::uint64_t seed, std::size_t frame_index) {
  return Rng::derive(seed, 0xAB0C0000ull + frame_index).state();
}

Tensor<double> center_gaussian(int side) {
  Tensor<double> g(Shape{side, side});
  const double c = (side - 1) / 2.0;
  const double sigma = side / 4.0;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      g.at(y, x) = std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) * inv2s2);
  return g;
}

FrameMetrics baseline_metrics(const Dataset& ds, int borji_splits, std::uint64_t seed,
                              double epsilon_kl) {
  FBL_CHECK(!ds.samples.empty(), Err::EmptyDataset, "baseline: empty dataset");
  Tensor<double> g = center_gaussian(ds.side);
  std::vector<FrameMetrics> rows;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    rows.push_back(eval_frame_metrics(s.id, g, s.gt.cast<double>(), s.fix, borji_splits,
                                      frame_seed(seed, i), epsilon_kl));
  }
  return mean_metrics(rows);
}

Dataset synth_split(const ModelConfig& cfg, int split) {
  SynthSpec sp;
  sp.n_samples = split == 1 ? cfg.synth_train : cfg.synth_val;
  sp.side = cfg.input_side;
  sp.n_blobs = cfg.synth_blobs;
  sp.sigma_lo = cfg.synth_sigma_lo;
  sp.sigma_hi = cfg.synth_sigma_hi;
  sp.theta_fix = cfg.theta_fix;
  return synth_generate(sp, Rng::derive(cfg.seed, 0x5EED0000ull + static_cast<std::uint64_t>(split)).state());
}

Dataset resolve_train_data(const ModelConfig& cfg, const std::string& data_arg) {
  if (data_arg == "synth") return synth_split(cfg, 1);
  fs::path root(data_arg);
  if (fs::is_directory(root / "train"))
    return load_dataset((root / "train").string(), cfg.input_side, cfg.theta_fix);
  return load_dataset(data_arg, cfg.input_side, cfg.theta_fix);
}

Dataset resolve_val_data(const ModelConfig& cfg, const std::string& data_arg) {
  if (data_arg == "synth") return synth_split(cfg, 2);
  fs::path root(data_arg);
  if (fs::is_directory(root / "val"))
    return load_dataset((root / "val").string(), cfg.input_side, cfg.theta_fix);
  return load_dataset(data_arg, cfg.input_side, cfg.theta_fix);
}

void predict(const std::string& ckpt_dir, const std::string& image_path,
             const std::string& out_path, bool native_size) {
  std::unique_ptr<Trainer> tr = Trainer::from_checkpoint(ckpt_dir);
  FblNet<float>& m = tr->model();
  m.set_train(false);
  NoGradGuard ng;

  Tensor<float> img = read_png_rgb(image_path);
  const int nh = img.dim(1), nw = img.dim(2);
  const int S = tr->config().input_side;
  if (nh != S || nw != S) img = detail::bilinear_resize_plain(img, S, S);
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = std::clamp(img[i], 0.f, 1.f);

  Intermediates<float> inter = m.forward(img.reshaped(Shape{1, 3, S, S}));
  Tensor<float> heat = inter.A->value.reshaped(Shape{1, S, S});
  if (native_size && (nh != S || nw != S))
    heat = detail::bilinear_resize_plain(heat, nh, nw);
  write_png_gray(out_path, heat.reshaped(Shape{heat.dim(1), heat.dim(2)}));
}

std::vector<AblationRow> run_ablation_grid(const ModelConfig& base, const std::string& grid,
                                           const Dataset& train_ds, const Dataset& val_ds,
                                           bool verbose) {
  struct Cell {
    std::string label;
    ModelConfig cfg;
  };
  std::vector<Cell> cells;
  ModelConfig c = base;
  if (grid == "fusion") {
    const std::pair<FusionMode, const char*> rows[] = {{FusionMode::cat, "Cat."},
                                                       {FusionMode::add, "Add."},
                                                       {FusionMode::no_fbl, "w/o FBL"},
                                                       {FusionMode::fbl, "w/ FBL"}};
    for (auto [mode, label] : rows) {
      c.fusion_mode = mode;
      cells.push_back({label, c});
    }
  } else if (grid == "feedback") {
    c.fusion_mode = FusionMode::fbl;  // the node only matters with the loop on
    const std::pair<FeedbackNode, const char*> rows[] = {{FeedbackNode::d0, "B = d_0"},
                                                         {FeedbackNode::d1, "B = d_1"},
                                                         {FeedbackNode::d2, "B = d_2"},
                                                         {FeedbackNode::d3, "B = d_3"},
                                                         {FeedbackNode::d4, "B = d_4"}};
    for (auto [node, label] : rows) {
      c.feedback_node = node;
      cells.push_back({label, c});
    }
  } else if (grid == "encoder") {
    const std::pair<EncoderMode, const char*> rows[] = {{EncoderMode::cnn, "CNN"},
                                                        {EncoderMode::trans, "Trans."},
                                                        {EncoderMode::both, "CNN + Trans."}};
    for (auto [mode, label] : rows) {
      c.encoder_mode = mode;
      cells.push_back({label, c});
    }
  } else {
    throw FblError(Err::Config, "unknown ablation grid '" + grid + "'");
  }

  std::vector<AblationRow> rows;
  for (const Cell& cell : cells) {
    if (verbose) std::cout << "[" << grid << "] training '" << cell.label << "'\n";
    Trainer tr(cell.cfg);
    tr.train(train_ds, val_ds, /*out_dir=*/"", /*shuffle=*/true);
    EvalResult ev = tr.evaluate(val_ds);
    rows.push_back({cell.label, ev.mean});
    if (verbose)
      std::cout << "  SIM " << ev.mean.sim << "  CC " << ev.mean.cc << "  NSS " << ev.mean.nss
                << "\n";
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant\tSIM\tCC\tNSS\tavg\n";
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const AblationRow& r : rows) {
    const double avg = (r.mean.sim + r.mean.cc + r.mean.nss) / 3.0;
    os << r.label << "\t" << r.mean.sim << "\t" << r.mean.cc << "\t" << r.mean.nss << "\t" << avg
       << "\n";
  }
  return os.str();
}

void run_ablation(const ModelConfig& base, const std::string& grid_spec,
                  const std::string& out_dir, bool verbose) {
  std::vector<std::string> grids;
  if (grid_spec == "all") {
    grids = {"fusion", "feedback", "encoder"};
  } else {
    std::stringstream ss(grid_spec);
    std::string g;
    while (std::getline(ss, g, ','))
      if (!g.empty()) grids.push_back(g);
  }
  FBL_CHECK(!grids.empty(), Err::Config, "empty ablation grid spec");

  // One shared pair of synthetic splits: every cell of every grid sees the
  // same data, seed, and budget.
  Dataset train_ds = synth_split(base, 1);
  Dataset val_ds = synth_split(base, 2);

  fs::create_directories(out_dir);
  for (const std::string& g : grids) {
    std::vector<AblationRow> rows = run_ablation_grid(base, g, train_ds, val_ds, verbose);
    std::string table = format_ablation_table(rows);
    const std::string fname = g == "feedback" ? "feedback_node.tsv" : g + ".tsv";
    std::ofstream out(fs::path(out_dir) / fname, std::ios::binary | std::ios::trunc);
    FBL_CHECK(out.good(), Err::Io, "cannot write ablation table under " + out_dir);
    out << table;
    if (verbose) std::cout << "\n== " << g << " ==\n" << table;
  }
}

}  // namespace fblnet
