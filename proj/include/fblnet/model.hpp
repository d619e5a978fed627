#pragma once

#include "fblnet/config.hpp"
#include "fblnet/decoder.hpp"
#include "fblnet/encoder.hpp"
#include "fblnet/fbl.hpp"
#include "fblnet/fusion.hpp"

namespace fblnet {

template <typename T>
struct Intermediates {
  std::array<Var<T>, 5> C;   // C1..C5
  std::array<Var<T>, 4> Tt;  // T1..T4
  Var<T> K_fusion;           // (1,4w,g,g); null outside fbl mode
  Var<T> K_a;                // (D,N_t); null for add/cat
  Var<T> W;                  // (B,N_t,N_t); null for add/cat
  Var<T> F;                  // fused map (B,4w,g,g)
  std::array<Var<T>, 5> d;   // d0..d4
  Var<T> A;                  // (B,1,S,S)
};

// The full network. A disabled encoder pathway is replaced by zero tensors of
// the planned shapes, so fusion and decoder run one code path for every
// encoder_mode.
template <typename T>
class FblNet {
 public:
  ModelConfig cfg;
  ShapePlan plan;
  ParamStore<T> store;
  CnnEncoder<T> cnn;
  TransEncoder<T> trans;
  KnowledgeModule<T> knowledge;
  FusionModule<T> fusion;
  DecoderModule<T> decoder;

  explicit FblNet(const ModelConfig& c) : cfg(c), plan(shape_plan(validate_config(c))) {
    Rng rng = Rng::derive(cfg.seed, 0xF1B1);
    cnn = CnnEncoder<T>(store, "cnn", cfg.base_width, rng);
    trans = TransEncoder<T>(store, "trans", cfg.base_width, plan.window, rng);
    knowledge = KnowledgeModule<T>(store, plan, rng);
    fusion = FusionModule<T>(store, "fusion", plan, rng);
    decoder = DecoderModule<T>(store, "decoder", cfg.base_width, rng);
  }

  void set_train(bool t) { training_ = t; }
  bool is_training() const { return training_; }
  int iteration() const { return knowledge.iter(); }

  Intermediates<T> forward(const Tensor<T>& images) {
    const Shape& s = images.shape();
    FBL_CHECK(s.size() == 4 && s[1] == 3 && s[2] == cfg.input_side && s[3] == cfg.input_side,
              Err::Shape, "forward expects (B,3,S,S) images, got " + shape_str(s));
    int batch = s[0];
    Var<T> img = make_var<T>(images);

    Intermediates<T> r;
    if (cfg.encoder_mode != EncoderMode::trans) {
      r.C = cnn(img, training_);
    } else {
      for (int i = 0; i < 5; ++i) r.C[static_cast<std::size_t>(i)] = zero_stage(batch, plan.C[static_cast<std::size_t>(i)]);
    }
    if (cfg.encoder_mode != EncoderMode::cnn) {
      r.Tt = trans(img);
    } else {
      for (int i = 0; i < 4; ++i) r.Tt[static_cast<std::size_t>(i)] = zero_stage(batch, plan.T[static_cast<std::size_t>(i)]);
    }

    if (cfg.fusion_mode == FusionMode::fbl) r.K_fusion = knowledge.fusion_view();
    auto fused = fusion.forward(r.C[4], r.Tt[3], r.K_fusion, cfg.fusion_mode, training_);
    r.K_a = fused.K_a;
    r.W = fused.W;
    r.F = fused.F_out;
    r.d = decoder.decode(r.F, r.C, r.Tt, training_);
    r.A = decoder.head(r.d[4]);
    return r;
  }

  // One knowledge update from the detached feedback feature of a finished
  // training forward. Only fbl mode schedules updates.
  void update_knowledge_from(const Intermediates<T>& inter) {
    FBL_CHECK(training_, Err::Eval, "knowledge update attempted in evaluation mode");
    FBL_CHECK(cfg.fusion_mode == FusionMode::fbl, Err::Mode,
              "knowledge update is only scheduled in fbl mode");
    knowledge.update(select_feedback(inter.d, cfg.feedback_node));
  }

 private:
  bool training_ = true;

  static Var<T> zero_stage(int batch, const StageShape& st) {
    return make_var<T>(Tensor<T>(Shape{batch, st.c, st.h, st.w}, T(0)));
  }
};

}  // namespace fblnet
