#include "fblnet/config.hpp"

#include <fstream>
#include <sstream>

namespace fblnet {

std::string to_string(FeedbackNode n) {
  static const char* names[] = {"d0", "d1", "d2", "d3", "d4"};
  return names[static_cast<int>(n)];
}

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::fbl: return "fbl";
    case FusionMode::no_fbl: return "no_fbl";
    case FusionMode::add: return "add";
    case FusionMode::cat: return "cat";
  }
  return "?";
}

std::string to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::cnn: return "cnn";
    case EncoderMode::trans: return "trans";
    case EncoderMode::both: return "both";
  }
  return "?";
}

FeedbackNode feedback_node_from_string(const std::string& s) {
  for (int i = 0; i < 5; ++i)
    if (s == "d" + std::to_string(i)) return static_cast<FeedbackNode>(i);
  throw FblError(Err::Config, "unknown feedback node '" + s + "' (expected d0..d4)");
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "fbl") return FusionMode::fbl;
  if (s == "no_fbl") return FusionMode::no_fbl;
  if (s == "add") return FusionMode::add;
  if (s == "cat") return FusionMode::cat;
  throw FblError(Err::Config, "unknown fusion mode '" + s + "'");
}

EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "cnn") return EncoderMode::cnn;
  if (s == "trans") return EncoderMode::trans;
  if (s == "both") return EncoderMode::both;
  throw FblError(Err::Config, "unknown encoder mode '" + s + "'");
}

const ModelConfig& validate_config(const ModelConfig& cfg) {
  FBL_CHECK(cfg.input_side > 0 && cfg.input_side % 32 == 0, Err::Config,
            "input_side must be a positive multiple of 32, got " + std::to_string(cfg.input_side));
  FBL_CHECK(cfg.base_width > 0 && cfg.base_width % 4 == 0, Err::Config,
            "base_width must be a positive multiple of 4, got " + std::to_string(cfg.base_width));
  FBL_CHECK(cfg.mu >= 0 && cfg.eta >= 0 && cfg.xi >= 0, Err::Config,
            "loss weights must be nonnegative");
  FBL_CHECK(cfg.theta_fix > 0 && cfg.theta_fix <= 1, Err::Config,
            "theta_fix must lie in (0,1]");
  FBL_CHECK(cfg.epsilon_kl > 0, Err::Config, "epsilon_kl must be positive");
  FBL_CHECK(cfg.lr > 0, Err::Config, "lr must be positive");
  FBL_CHECK(cfg.weight_decay >= 0, Err::Config, "weight_decay must be nonnegative");
  FBL_CHECK(cfg.batch_size >= 1, Err::Config, "batch_size must be at least 1");
  FBL_CHECK(cfg.steps >= 0, Err::Config, "steps must be nonnegative");
  FBL_CHECK(cfg.val_every >= 1, Err::Config, "val_every must be at least 1");
  FBL_CHECK(cfg.borji_splits >= 1, Err::Config, "borji_splits must be at least 1");
  FBL_CHECK(cfg.synth_train >= 1 && cfg.synth_val >= 1, Err::Config,
            "synthetic split sizes must be at least 1");
  FBL_CHECK(cfg.synth_blobs >= 1, Err::Config, "synth_blobs must be at least 1");
  FBL_CHECK(cfg.synth_sigma_lo > 0 && cfg.synth_sigma_hi >= cfg.synth_sigma_lo, Err::Config,
            "synthetic blob sigma range invalid");
  return cfg;
}

ShapePlan shape_plan(const ModelConfig& cfg) {
  validate_config(cfg);
  const int S = cfg.input_side, w = cfg.base_width;
  ShapePlan p;
  // C_i: width w at the first two stages (stem + first residual stage), then
  // doubling; side halves every stage.
  for (int i = 1; i <= 5; ++i) {
    int ch = w << std::max(0, i - 2);
    int side = S >> i;
    p.C[i - 1] = {ch, side, side};
  }
  // T_i: width doubles every stage starting at w; side starts at S/4.
  for (int i = 1; i <= 4; ++i) {
    int ch = w << (i - 1);
    int side = S >> (i + 1);
    p.T[i - 1] = {ch, side, side};
  }
  // decoder ladder from the fused map at S/16 up to full resolution
  const int dch[5] = {4 * w, 2 * w, w, w / 2, w / 4};
  for (int j = 0; j < 5; ++j) {
    int side = (S / 16) << j;
    p.d[j] = {dch[j], side, side};
  }
  p.K_shape = p.d[static_cast<int>(cfg.feedback_node)];
  p.K_fusion_shape = {4 * w, S / 16, S / 16};
  p.A_shape = {1, S, S};
  p.window = S / 32;
  p.n_tokens = (S / 16) * (S / 16);
  p.attn_dim = 4 * w;
  return p;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    int r = std::stoi(v, &pos);
    FBL_CHECK(pos == v.size(), Err::Config, "trailing characters in " + key + " = " + v);
    return r;
  } catch (const FblError&) {
    throw;
  } catch (...) {
    throw FblError(Err::Config, "bad integer for " + key + ": '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    FBL_CHECK(pos == v.size(), Err::Config, "trailing characters in " + key + " = " + v);
    return r;
  } catch (const FblError&) {
    throw;
  } catch (...) {
    throw FblError(Err::Config, "bad number for " + key + ": '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    FBL_CHECK(pos == v.size(), Err::Config, "trailing characters in " + key + " = " + v);
    return r;
  } catch (const FblError&) {
    throw;
  } catch (...) {
    throw FblError(Err::Config, "bad integer for " + key + ": '" + v + "'");
  }
}

}  // namespace

ModelConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  for (const auto& [key, v] : kv) {
    if (key == "input_side") cfg.input_side = parse_int(key, v);
    else if (key == "base_width") cfg.base_width = parse_int(key, v);
    else if (key == "feedback_node") cfg.feedback_node = feedback_node_from_string(v);
    else if (key == "fusion_mode") cfg.fusion_mode = fusion_mode_from_string(v);
    else if (key == "encoder_mode") cfg.encoder_mode = encoder_mode_from_string(v);
    else if (key == "mu") cfg.mu = parse_double(key, v);
    else if (key == "eta") cfg.eta = parse_double(key, v);
    else if (key == "xi") cfg.xi = parse_double(key, v);
    else if (key == "epsilon_kl") cfg.epsilon_kl = parse_double(key, v);
    else if (key == "theta_fix") cfg.theta_fix = parse_double(key, v);
    else if (key == "seed") cfg.seed = parse_u64(key, v);
    else if (key == "lr") cfg.lr = parse_double(key, v);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(key, v);
    else if (key == "batch_size") cfg.batch_size = parse_int(key, v);
    else if (key == "steps") cfg.steps = parse_int(key, v);
    else if (key == "val_every") cfg.val_every = parse_int(key, v);
    else if (key == "borji_splits") cfg.borji_splits = parse_int(key, v);
    else if (key == "synth_train") cfg.synth_train = parse_int(key, v);
    else if (key == "synth_val") cfg.synth_val = parse_int(key, v);
    else if (key == "synth_blobs") cfg.synth_blobs = parse_int(key, v);
    else if (key == "synth_sigma_lo") cfg.synth_sigma_lo = parse_double(key, v);
    else if (key == "synth_sigma_hi") cfg.synth_sigma_hi = parse_double(key, v);
    else throw FblError(Err::Config, "unknown config key '" + key + "'");
  }
  return validate_config(cfg), cfg;
}

ModelConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    FBL_CHECK(eq != std::string::npos, Err::Config,
              "config line " + std::to_string(lineno) + " is not key = value: '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    FBL_CHECK(!key.empty() && !val.empty(), Err::Config,
              "config line " + std::to_string(lineno) + " has empty key or value");
    FBL_CHECK(!kv.count(key), Err::Config, "duplicate config key '" + key + "'");
    kv[key] = val;
  }
  return config_from_kv(kv);
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  FBL_CHECK(in.good(), Err::Io, "cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::map<std::string, std::string> config_to_kv(const ModelConfig& cfg) {
  auto num = [](double x) {
    std::ostringstream o;
    o.precision(17);
    o << x;
    return o.str();
  };
  std::map<std::string, std::string> kv;
  kv["input_side"] = std::to_string(cfg.input_side);
  kv["base_width"] = std::to_string(cfg.base_width);
  kv["feedback_node"] = to_string(cfg.feedback_node);
  kv["fusion_mode"] = to_string(cfg.fusion_mode);
  kv["encoder_mode"] = to_string(cfg.encoder_mode);
  kv["mu"] = num(cfg.mu);
  kv["eta"] = num(cfg.eta);
  kv["xi"] = num(cfg.xi);
  kv["epsilon_kl"] = num(cfg.epsilon_kl);
  kv["theta_fix"] = num(cfg.theta_fix);
  kv["seed"] = std::to_string(cfg.seed);
  kv["lr"] = num(cfg.lr);
  kv["weight_decay"] = num(cfg.weight_decay);
  kv["batch_size"] = std::to_string(cfg.batch_size);
  kv["steps"] = std::to_string(cfg.steps);
  kv["val_every"] = std::to_string(cfg.val_every);
  kv["borji_splits"] = std::to_string(cfg.borji_splits);
  kv["synth_train"] = std::to_string(cfg.synth_train);
  kv["synth_val"] = std::to_string(cfg.synth_val);
  kv["synth_blobs"] = std::to_string(cfg.synth_blobs);
  kv["synth_sigma_lo"] = num(cfg.synth_sigma_lo);
  kv["synth_sigma_hi"] = num(cfg.synth_sigma_hi);
  return kv;
}

}  // namespace fblnet
