#pragma once

#include <memory>
#include <string>
#include <vector>

#include "s2rm/attention.hpp"
#include "s2rm/codec.hpp"
#include "s2rm/geometry.hpp"
#include "s2rm/tensor.hpp"

// Recurrent cores and the full sequence models: the spatially structured
// module bank (S2GRU), the additive-aggregation baselines (GRU/LSTM core),
// and the time-travelling oracle.

namespace s2rm {

struct GruParams {
  Tensor w_update, u_update, b_update;
  Tensor w_reset, u_reset, b_reset;
  Tensor w_cand, u_cand, b_cand;
};

GruParams make_gru(const std::string& prefix, int in, int hidden, Rng& rng,
                   ParamStore& store);

// z = sig(W_z u + U_z h + b_z); r = sig(W_r u + U_r h + b_r);
// cand = tanh(W_h u + U_h (r*h) + b_h); h' = (1-z)*h + z*cand.
Tensor gru_step(const Tensor& input, const Tensor& state, const GruParams& p);

struct LstmParams {
  Tensor w_in, u_in, b_in;
  Tensor w_forget, u_forget, b_forget;
  Tensor w_out, u_out, b_out;
  Tensor w_cell, u_cell, b_cell;
};

LstmParams make_lstm(const std::string& prefix, int in, int hidden, Rng& rng,
                     ParamStore& store);

struct LstmOut {
  Tensor hidden, memory;
};
LstmOut lstm_step(const Tensor& input, const Tensor& hidden,
                  const Tensor& memory, const LstmParams& p);

// ---------------------------------------------------------------------------

struct S2RMConfig {
  int modules = 4;
  int hidden = 32;     // per-module state width
  int embedding = 16;  // sphere dimension, must be a multiple of 4 (2D input)
  int encoding = 128;  // observation encoding width
  int enc_hidden = 256;
  int dec_hidden = 256;
  int input_heads = 2, input_key = 16, input_value = 64;
  int ic_heads = 2, ic_key = 16, ic_value = 32;
  int gate_hidden = 32;
  KernelConfig kernel{1.0, 0.6};
  AttentionOptions attention;
  double domain = 48.0;  // positions live in [0, domain]^2

  void validate() const;
  // Sizes used for the published task scale: 10 modules of width 128, input
  // attention (128,2,16)/(128,2,128), inter-cell (128,4,16)/(128,4,128).
  static S2RMConfig paper_scale();
};

// Hidden state container shared by all models. `memory` is only defined for
// cores that carry one (LSTM); the step signature plumbs it through so such
// cores can plug in without interface changes.
struct S2RMState {
  Tensor hidden;
  Tensor memory;
};

class ForwardModel {
 public:
  virtual ~ForwardModel() = default;
  virtual const std::string& kind() const = 0;
  virtual ParamStore& params() = 0;
  virtual const ParamStore& params() const = 0;
  virtual S2RMState initial_state() const = 0;
  virtual S2RMState step(const S2RMState& state,
                         const std::vector<Crop>& obs) const = 0;
  // 121 logits for the crop centered at (row, col); read-only on the state.
  virtual Tensor query_logits(const S2RMState& state, double row,
                              double col) const = 0;
  // Oracle models consume the observations of the step being predicted.
  virtual bool wants_future() const { return false; }
};

class S2GruModel : public ForwardModel {
 public:
  S2GruModel(const S2RMConfig& cfg, std::uint64_t seed);

  const std::string& kind() const override { return kind_; }
  ParamStore& params() override { return store_; }
  const ParamStore& params() const override { return store_; }
  S2RMState initial_state() const override;
  S2RMState step(const S2RMState& state, const std::vector<Crop>& obs) const override;
  Tensor query_logits(const S2RMState& state, double row, double col) const override;

  const S2RMConfig& config() const { return cfg_; }
  Tensor& module_embeddings() { return embeddings_; }
  const Tensor& module_embeddings() const { return embeddings_; }
  // Per-module input from the observation set, before the recurrent update.
  Tensor observation_input(const S2RMState& state, const std::vector<Crop>& obs,
                           AttentionTrace* trace = nullptr) const;

 private:
  std::string kind_ = "s2gru";
  S2RMConfig cfg_;
  ParamStore store_;
  MlpCodecParams encoder_, decoder_;
  Tensor embeddings_;
  AttentionParams input_attn_, ic_attn_;
  GateParams input_gate_, ic_gate_;
  std::vector<GruParams> cores_;
};

struct BaselineConfig {
  int hidden = 128;
  int encoding = 128;
  int enc_hidden = 256;
  int dec_hidden = 256;
  int embedding = 16;
  int oracle_hidden = 256;  // MLP width of the time-travelling oracle
  double domain = 48.0;
  void validate() const;
  // LSTM hidden 512, oracle MLP hidden 512 at the published task scale.
  static BaselineConfig paper_scale();
};

// Sum of joint position/crop encodings; the empty set maps to the zero
// vector. Exactly permutation-invariant (ordered accumulation).
Tensor baseline_aggregate(const std::vector<Crop>& obs,
                          const MlpCodecParams& joint_encoder, int embedding,
                          double domain);

// GQN-style baseline: additive aggregation into a single recurrent core.
class BaselineModel : public ForwardModel {
 public:
  enum class Core { kGru, kLstm };
  BaselineModel(const BaselineConfig& cfg, Core core, std::uint64_t seed);

  const std::string& kind() const override { return kind_; }
  ParamStore& params() override { return store_; }
  const ParamStore& params() const override { return store_; }
  S2RMState initial_state() const override;
  S2RMState step(const S2RMState& state, const std::vector<Crop>& obs) const override;
  Tensor query_logits(const S2RMState& state, double row, double col) const override;

  const BaselineConfig& config() const { return cfg_; }

 private:
  std::string kind_;
  BaselineConfig cfg_;
  Core core_;
  ParamStore store_;
  MlpCodecParams encoder_, decoder_;
  GruParams gru_;
  LstmParams lstm_;
};

// Non-recurrent sanity baseline: consumes the aggregate of the step being
// predicted through a two-layer MLP, then decodes like the baseline.
class TtoModel : public ForwardModel {
 public:
  TtoModel(const BaselineConfig& cfg, std::uint64_t seed);

  const std::string& kind() const override { return kind_; }
  ParamStore& params() override { return store_; }
  const ParamStore& params() const override { return store_; }
  S2RMState initial_state() const override;
  S2RMState step(const S2RMState& state, const std::vector<Crop>& obs) const override;
  Tensor query_logits(const S2RMState& state, double row, double col) const override;
  bool wants_future() const override { return true; }

 private:
  std::string kind_ = "tto";
  BaselineConfig cfg_;
  ParamStore store_;
  MlpCodecParams encoder_, decoder_;
  Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

// Factory over the model kinds exposed by the run configuration.
std::unique_ptr<ForwardModel> make_model(const std::string& kind,
                                         const S2RMConfig& s2rm_cfg,
                                         const BaselineConfig& baseline_cfg,
                                         std::uint64_t seed);

}  // namespace s2rm
