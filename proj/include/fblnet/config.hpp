#pragma once

#include <array>
#include <map>
#include <string>

#include "fblnet/errors.hpp"

namespace fblnet {

enum class FeedbackNode { d0, d1, d2, d3, d4 };
enum class FusionMode { fbl, no_fbl, add, cat };
enum class EncoderMode { cnn, trans, both };

std::string to_string(FeedbackNode n);
std::string to_string(FusionMode m);
std::string to_string(EncoderMode m);
FeedbackNode feedback_node_from_string(const std::string& s);
FusionMode fusion_mode_from_string(const std::string& s);
EncoderMode encoder_mode_from_string(const std::string& s);

struct ModelConfig {
  int input_side = 224;
  int base_width = 64;
  FeedbackNode feedback_node = FeedbackNode::d2;
  FusionMode fusion_mode = FusionMode::fbl;
  EncoderMode encoder_mode = EncoderMode::both;
  double mu = 1.0;
  double eta = 0.1;
  double xi = 0.1;
  double epsilon_kl = 1e-7;
  double theta_fix = 0.75;
  std::uint64_t seed = 0;

  // training knobs
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 8;
  int steps = 2000;
  int val_every = 200;
  int borji_splits = 100;

  // synthetic data generator
  int synth_train = 500;
  int synth_val = 100;
  int synth_blobs = 3;
  double synth_sigma_lo = 0.05;  // as fraction of S
  double synth_sigma_hi = 0.12;
};

struct StageShape {
  int c = 0, h = 0, w = 0;
  bool operator==(const StageShape&) const = default;
};

// Exact shapes of every intermediate tensor for a given (S, w).
struct ShapePlan {
  std::array<StageShape, 5> C;  // C1..C5 at index 0..4
  std::array<StageShape, 4> T;  // T1..T4
  std::array<StageShape, 5> d;  // d0..d4
  StageShape K_shape;
  StageShape K_fusion_shape;
  StageShape A_shape;
  int window = 0;    // attention window side, shared by all transformer stages
  int n_tokens = 0;  // fused token count (S/16)^2
  int attn_dim = 0;  // fused channel dim, 4w
};

const ModelConfig& validate_config(const ModelConfig& cfg);
ShapePlan shape_plan(const ModelConfig& cfg);

// Flat key=value text, '#' comments. Unknown keys are rejected so typos fail
// loudly instead of silently training with defaults.
ModelConfig parse_config_text(const std::string& text);
ModelConfig load_config_file(const std::string& path);
std::map<std::string, std::string> config_to_kv(const ModelConfig& cfg);
ModelConfig config_from_kv(const std::map<std::string, std::string>& kv);

}  // namespace fblnet
