#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fblnet/checkpoint.hpp"
#include "fblnet/data.hpp"
#include "fblnet/model.hpp"

namespace fblnet {

// Adam with coupled L2 weight decay (decay enters the gradient). Moments are
// keyed by parameter name and walk the store in map order; parameters that
// never received a gradient (disabled pathway) are skipped, like a framework
// optimizer skips grad-less tensors.
class Adam {
 public:
  Adam() = default;
  Adam(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<float>& store);
  int t() const { return t_; }
  void set_t(int t) { t_ = t; }

  // Moment tensors under "optim.m." / "optim.v." for checkpointing.
  std::map<std::string, Tensor<float>> state_tensors() const;
  void load_state(const std::map<std::string, Tensor<float>>& tensors);

 private:
  double lr_ = 1e-4, wd_ = 1e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

struct EvalResult {
  std::vector<FrameMetrics> frames;
  FrameMetrics mean;
};

struct TrainResult {
  double final_loss = 0;
  int best_step = -1;
  FrameMetrics best_val;
  std::string best_dir, last_dir;
};

// Owns the model, optimizer, and step counter; every CLI subcommand and the
// ablation runner go through this.
class Trainer {
 public:
  explicit Trainer(const ModelConfig& cfg);

  // Rebuilds the model from the config embedded in a checkpoint manifest and
  // restores parameters, buffers (including knowledge), moments, and step.
  static std::unique_ptr<Trainer> from_checkpoint(const std::string& dir);

  FblNet<float>& model() { return model_; }
  const ModelConfig& config() const { return cfg_; }
  int step() const { return step_; }
  // Extends or shortens the run target; used when resuming.
  void set_steps(int steps) { cfg_.steps = steps; }

  // One optimizer step on the given sample indices. Loss is the batch mean of
  // per-sample losses; in fbl mode the knowledge update runs after the step.
  float train_step(const Dataset& ds, const std::vector<int>& batch);

  // Full run: cfg.steps steps with per-epoch reshuffles, validation every
  // cfg.val_every steps keeping the best checkpoint by CC. Empty out_dir
  // disables checkpoint writes (ablation cells). on_step(step, loss) fires
  // after every step when set.
  TrainResult train(const Dataset& train_ds, const Dataset& val_ds, const std::string& out_dir,
                    bool shuffle = true,
                    const std::function<void(int, float)>& on_step = {});

  // Pure evaluation: eval mode, no gradients, knowledge untouched.
  EvalResult evaluate(const Dataset& ds);

  void save(const std::string& dir, const std::map<std::string, double>& metric_snapshot);
  void load(const std::string& dir);

 private:
  ModelConfig cfg_;
  FblNet<float> model_;
  Adam opt_;
  int step_ = 0;
};

// Per-frame metric bundle shared by evaluate, the ablation runner, and the
// baseline comparison. pred/gt are raw (H,W) maps; normalization for SIM and
// KLdiv happens inside.
FrameMetrics eval_frame_metrics(const std::string& id, const Tensor<double>& pred,
                                const Tensor<double>& gt, const FixationSet& fix,
                                int borji_splits, std::uint64_t borji_seed, double epsilon_kl);

// Deterministic per-frame seed for AUC-Borji negative sampling.
std::uint64_t frame_seed(std::uint64_t seed, std::size_t frame_index);

// Fixed isotropic Gaussian centered in the frame (sigma = side/4), the
// no-learning control any trained model has to beat.
Tensor<double> center_gaussian(int side);

// Mean metrics of the center-Gaussian control over a dataset.
FrameMetrics baseline_metrics(const Dataset& ds, int borji_splits, std::uint64_t seed,
                              double epsilon_kl);

// Synthetic train/val splits from the config knobs; split 1 trains, 2 validates.
Dataset synth_split(const ModelConfig& cfg, int split);

// Loads a directory dataset for training (root/train + root/val) or
// evaluation (root/val if present, else root itself); "synth" selects the
// generator.
Dataset resolve_train_data(const ModelConfig& cfg, const std::string& data_arg);
Dataset resolve_val_data(const ModelConfig& cfg, const std::string& data_arg);

// Heatmap prediction for one image; model config comes from the checkpoint.
void predict(const std::string& ckpt_dir, const std::string& image_path,
             const std::string& out_path, bool native_size);

struct AblationRow {
  std::string label;
  FrameMetrics mean;
};

// One table: trains each cell with identical seed, data, and budget, then
// evaluates. grid is "fusion", "feedback", or "encoder".
std::vector<AblationRow> run_ablation_grid(const ModelConfig& base, const std::string& grid,
                                           const Dataset& train_ds, const Dataset& val_ds,
                                           bool verbose);

std::string format_ablation_table(const std::vector<AblationRow>& rows);

// Runs the grids named in grid_spec (comma list or "all") on the synthetic
// sets and writes fusion.tsv / feedback_node.tsv / encoder.tsv under out_dir.
void run_ablation(const ModelConfig& base, const std::string& grid_spec,
                  const std::string& out_dir, bool verbose);

}  // namespace fblnet
