#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fblnet/harness.hpp"

using namespace fblnet;

int main(int argc, char** argv) {
  CLI::App app{"fblnet: saliency prediction with a training-time feedback loop"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and write checkpoints");
  std::string t_config, t_data, t_out, t_fusion, t_node, t_encoder, t_resume;
  std::uint64_t t_seed = 0;
  int t_steps = 0;
  bool t_no_shuffle = false;
  train->add_option("--config", t_config, "key=value config file");
  train->add_option("--data", t_data, "dataset root (train/ + val/) or 'synth'")->required();
  train->add_option("--out", t_out, "output directory for checkpoints")->required();
  train->add_option("--seed", t_seed, "rng seed");
  train->add_option("--fusion", t_fusion, "fbl | no_fbl | add | cat");
  train->add_option("--feedback-node", t_node, "d0..d4");
  train->add_option("--encoder", t_encoder, "cnn | trans | both");
  train->add_option("--steps", t_steps, "total optimizer steps");
  train->add_flag("--no-shuffle", t_no_shuffle, "keep dataset order fixed");
  train->add_option("--resume", t_resume, "checkpoint directory to continue from");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string e_ckpt, e_data, e_report;
  eval->add_option("--ckpt", e_ckpt, "checkpoint directory")->required();
  eval->add_option("--data", e_data, "dataset root or 'synth'")->required();
  eval->add_option("--report", e_report, "output TSV report path")->required();

  // predict
  auto* pred = app.add_subcommand("predict", "write a heatmap PNG for one image");
  std::string p_ckpt, p_image, p_out;
  bool p_native = false;
  pred->add_option("--ckpt", p_ckpt, "checkpoint directory")->required();
  pred->add_option("--image", p_image, "input image (PNG)")->required();
  pred->add_option("--out", p_out, "output heatmap path (PNG)")->required();
  pred->add_flag("--native-size", p_native, "resize the heatmap back to the source resolution");

  // ablate
  auto* abl = app.add_subcommand("ablate", "run ablation grids on the synthetic sets");
  std::string a_config, a_grid = "all", a_out;
  std::uint64_t a_seed = 0;
  int a_steps = 0;
  abl->add_option("--config", a_config, "key=value config file");
  abl->add_option("--grid", a_grid, "fusion | feedback | encoder | all (comma list ok)");
  abl->add_option("--out", a_out, "output directory for table files")->required();
  abl->add_option("--seed", a_seed, "rng seed");
  abl->add_option("--steps", a_steps, "per-cell training budget");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      ModelConfig cfg = t_config.empty() ? ModelConfig{} : load_config_file(t_config);
      if (train->count("--seed")) cfg.seed = t_seed;
      if (train->count("--fusion")) cfg.fusion_mode = fusion_mode_from_string(t_fusion);
      if (train->count("--feedback-node")) cfg.feedback_node = feedback_node_from_string(t_node);
      if (train->count("--encoder")) cfg.encoder_mode = encoder_mode_from_string(t_encoder);
      if (train->count("--steps")) cfg.steps = t_steps;
      validate_config(cfg);

      Dataset train_ds = resolve_train_data(cfg, t_data);
      Dataset val_ds = resolve_val_data(cfg, t_data);
      std::cout << "train " << train_ds.size() << " samples, val " << val_ds.size()
                << ", side " << cfg.input_side << ", width " << cfg.base_width << ", steps "
                << cfg.steps << "\n";

      std::unique_ptr<Trainer> tr;
      if (!t_resume.empty()) {
        tr = Trainer::from_checkpoint(t_resume);
        if (train->count("--steps")) tr->set_steps(t_steps);
        std::cout << "resumed from " << t_resume << " at step " << tr->step() << "\n";
      } else {
        tr = std::make_unique<Trainer>(cfg);
      }

      const int print_every = cfg.steps > 200 ? 50 : (cfg.steps > 20 ? 10 : 1);
      TrainResult res = tr->train(train_ds, val_ds, t_out, !t_no_shuffle,
                                  [&](int step, float loss) {
                                    if (step % print_every == 0 || step == cfg.steps)
                                      std::cout << "step " << step << "  loss " << loss << "\n";
                                  });
      std::cout << "done: final loss " << res.final_loss;
      if (res.best_step >= 0)
        std::cout << ", best val CC " << res.best_val.cc << " at step " << res.best_step;
      std::cout << "\ncheckpoints: " << res.last_dir;
      if (!res.best_dir.empty()) std::cout << " (best: " << res.best_dir << ")";
      std::cout << "\n";
    } else if (*eval) {
      std::unique_ptr<Trainer> tr = Trainer::from_checkpoint(e_ckpt);
      Dataset ds = resolve_val_data(tr->config(), e_data);
      EvalResult ev = tr->evaluate(ds);
      write_report(e_report, ev.frames);
      std::cout << "evaluated " << ev.frames.size() << " frames\n"
                << "mean: AUC_J " << ev.mean.auc_j << "  AUC_B " << ev.mean.auc_b << "  SIM "
                << ev.mean.sim << "  CC " << ev.mean.cc << "  Kldiv " << ev.mean.kldiv
                << "  NSS " << ev.mean.nss << "\n"
                << "report: " << e_report << "\n";
    } else if (*pred) {
      predict(p_ckpt, p_image, p_out, p_native);
      std::cout << "wrote " << p_out << "\n";
    } else if (*abl) {
      ModelConfig cfg = a_config.empty() ? ModelConfig{} : load_config_file(a_config);
      if (abl->count("--seed")) cfg.seed = a_seed;
      if (abl->count("--steps")) cfg.steps = a_steps;
      validate_config(cfg);
      run_ablation(cfg, a_grid, a_out, /*verbose=*/true);
    }
  } catch (const FblError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
