#include "s2rm/recurrent.hpp"

#include <cmath>

#include "s2rm/errors.hpp"

namespace s2rm {

namespace {

Tensor uniform_param(Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::param(std::move(shape), std::move(v));
}

Tensor zeros_param(Shape shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return Tensor::param(std::move(shape), std::vector<double>(n, 0.0));
}

void check_position(double row, double col, double domain) {
  if (!(row >= 0.0 && row <= domain && col >= 0.0 && col <= domain))
    throw InputError("position (" + std::to_string(row) + ", " + std::to_string(col) +
                     ") outside [0, " + std::to_string(domain) + "]^2");
}

std::vector<std::vector<double>> crop_positions(const std::vector<Crop>& obs,
                                                double domain) {
  std::vector<std::vector<double>> points;
  points.reserve(obs.size());
  for (const Crop& c : obs) {
    check_position(c.row, c.col, domain);
    points.push_back({static_cast<double>(c.row), static_cast<double>(c.col)});
  }
  return points;
}

}  // namespace

// ---------------------------------------------------------------------------
// Recurrent cores

GruParams make_gru(const std::string& prefix, int in, int hidden, Rng& rng,
                   ParamStore& store) {
  GruParams p;
  p.w_update = store.add(prefix + ".w_update", uniform_param({in, hidden}, in, rng));
  p.u_update = store.add(prefix + ".u_update", uniform_param({hidden, hidden}, hidden, rng));
  p.b_update = store.add(prefix + ".b_update", zeros_param({hidden}));
  p.w_reset = store.add(prefix + ".w_reset", uniform_param({in, hidden}, in, rng));
  p.u_reset = store.add(prefix + ".u_reset", uniform_param({hidden, hidden}, hidden, rng));
  p.b_reset = store.add(prefix + ".b_reset", zeros_param({hidden}));
  p.w_cand = store.add(prefix + ".w_cand", uniform_param({in, hidden}, in, rng));
  p.u_cand = store.add(prefix + ".u_cand", uniform_param({hidden, hidden}, hidden, rng));
  p.b_cand = store.add(prefix + ".b_cand", zeros_param({hidden}));
  return p;
}

Tensor gru_step(const Tensor& input, const Tensor& state, const GruParams& p) {
  Tensor update = sigmoid(add(affine(input, p.w_update, p.b_update),
                              contract("j,jk->k", state, p.u_update)));
  Tensor reset = sigmoid(add(affine(input, p.w_reset, p.b_reset),
                             contract("j,jk->k", state, p.u_reset)));
  Tensor cand = tanh(add(affine(input, p.w_cand, p.b_cand),
                         contract("j,jk->k", mul(reset, state), p.u_cand)));
  return add(mul(scale_shift(update, -1.0, 1.0), state), mul(update, cand));
}

LstmParams make_lstm(const std::string& prefix, int in, int hidden, Rng& rng,
                     ParamStore& store) {
  LstmParams p;
  p.w_in = store.add(prefix + ".w_in", uniform_param({in, hidden}, in, rng));
  p.u_in = store.add(prefix + ".u_in", uniform_param({hidden, hidden}, hidden, rng));
  p.b_in = store.add(prefix + ".b_in", zeros_param({hidden}));
  p.w_forget = store.add(prefix + ".w_forget", uniform_param({in, hidden}, in, rng));
  p.u_forget = store.add(prefix + ".u_forget", uniform_param({hidden, hidden}, hidden, rng));
  // Forget bias starts at one, the usual stabilization.
  p.b_forget = store.add(prefix + ".b_forget",
                         Tensor::param({hidden}, std::vector<double>(hidden, 1.0)));
  p.w_out = store.add(prefix + ".w_out", uniform_param({in, hidden}, in, rng));
  p.u_out = store.add(prefix + ".u_out", uniform_param({hidden, hidden}, hidden, rng));
  p.b_out = store.add(prefix + ".b_out", zeros_param({hidden}));
  p.w_cell = store.add(prefix + ".w_cell", uniform_param({in, hidden}, in, rng));
  p.u_cell = store.add(prefix + ".u_cell", uniform_param({hidden, hidden}, hidden, rng));
  p.b_cell = store.add(prefix + ".b_cell", zeros_param({hidden}));
  return p;
}

LstmOut lstm_step(const Tensor& input, const Tensor& hidden,
                  const Tensor& memory, const LstmParams& p) {
  auto gate_pre = [&](const Tensor& w, const Tensor& u, const Tensor& b) {
    return add(affine(input, w, b), contract("j,jk->k", hidden, u));
  };
  Tensor in_gate = sigmoid(gate_pre(p.w_in, p.u_in, p.b_in));
  Tensor forget = sigmoid(gate_pre(p.w_forget, p.u_forget, p.b_forget));
  Tensor out_gate = sigmoid(gate_pre(p.w_out, p.u_out, p.b_out));
  Tensor cell_cand = tanh(gate_pre(p.w_cell, p.u_cell, p.b_cell));
  Tensor memory_next = add(mul(forget, memory), mul(in_gate, cell_cand));
  Tensor hidden_next = mul(out_gate, tanh(memory_next));
  return {hidden_next, memory_next};
}

// ---------------------------------------------------------------------------
// S2GRU

void S2RMConfig::validate() const {
  if (modules <= 0 || hidden <= 0 || encoding <= 0 || enc_hidden <= 0 ||
      dec_hidden <= 0 || input_heads <= 0 || input_key <= 0 || input_value <= 0 ||
      ic_heads <= 0 || ic_key <= 0 || ic_value <= 0 || gate_hidden <= 0)
    throw ConfigError("model extents must be positive");
  if (embedding <= 0 || embedding % 4 != 0)
    throw ConfigError("embedding size must be a positive multiple of 4 for 2D positions");
  if (!(domain > 0.0)) throw ConfigError("spatial domain must be positive");
  kernel.validate();
}

S2RMConfig S2RMConfig::paper_scale() {
  S2RMConfig cfg;
  cfg.modules = 10;
  cfg.hidden = 128;
  cfg.embedding = 16;
  cfg.encoding = 128;
  cfg.enc_hidden = 256;
  cfg.dec_hidden = 256;
  cfg.input_heads = 2;
  cfg.input_key = 16;
  cfg.input_value = 128;
  cfg.ic_heads = 4;
  cfg.ic_key = 16;
  cfg.ic_value = 128;
  cfg.gate_hidden = 128;
  cfg.kernel = KernelConfig{1.0, 0.6};
  return cfg;
}

S2GruModel::S2GruModel(const S2RMConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  encoder_ = make_mlp_codec("encoder", kCropArea, cfg_.enc_hidden, cfg_.encoding, rng, store_);
  embeddings_ = make_module_embeddings(cfg_.modules, cfg_.embedding, rng.next_u64(), store_);
  input_attn_ = make_attention_params("input_attn", cfg_.encoding, cfg_.hidden,
                                      cfg_.encoding, cfg_.input_heads, cfg_.input_key,
                                      cfg_.input_value, cfg_.encoding, rng, store_);
  input_gate_ = make_gate_params("input_gate", cfg_.encoding, cfg_.gate_hidden, rng, store_);
  ic_attn_ = make_attention_params("ic_attn", cfg_.hidden, cfg_.hidden, cfg_.hidden,
                                   cfg_.ic_heads, cfg_.ic_key, cfg_.ic_value,
                                   cfg_.hidden, rng, store_);
  ic_gate_ = make_gate_params("ic_gate", cfg_.hidden, cfg_.gate_hidden, rng, store_);
  cores_.reserve(cfg_.modules);
  for (int m = 0; m < cfg_.modules; ++m)
    cores_.push_back(make_gru("core" + std::to_string(m), cfg_.encoding, cfg_.hidden,
                              rng, store_));
  decoder_ = make_mlp_codec("decoder", cfg_.hidden + cfg_.embedding, cfg_.dec_hidden,
                            kCropArea, rng, store_);
}

S2RMState S2GruModel::initial_state() const {
  return {Tensor::zeros({cfg_.modules, cfg_.hidden}), Tensor()};
}

Tensor S2GruModel::observation_input(const S2RMState& state,
                                     const std::vector<Crop>& obs,
                                     AttentionTrace* trace) const {
  if (obs.empty())
    return input_attention_empty(cfg_.modules, cfg_.encoding, input_gate_);
  Tensor crops = crops_to_tensor(obs);
  Tensor encodings = encode(crops, encoder_);
  Tensor positions = embed_positions(crop_positions(obs, cfg_.domain), cfg_.embedding);
  Tensor local = kernel_batch(embeddings_, positions, cfg_.kernel);
  return input_attention(encodings, state.hidden, local, input_attn_, input_gate_,
                         cfg_.attention, trace);
}

S2RMState S2GruModel::step(const S2RMState& state, const std::vector<Crop>& obs) const {
  Tensor input = observation_input(state, obs);
  Tensor pair = kernel_batch(embeddings_, embeddings_, cfg_.kernel);
  Tensor aggregated = inter_cell_attention(state.hidden, pair, ic_attn_, ic_gate_,
                                           cfg_.attention);
  std::vector<Tensor> next_rows;
  next_rows.reserve(cfg_.modules);
  for (int m = 0; m < cfg_.modules; ++m)
    next_rows.push_back(gru_step(row(input, m), row(aggregated, m), cores_[m]));
  return {stack_rows(next_rows), Tensor()};
}

Tensor S2GruModel::query_logits(const S2RMState& state, double r, double c) const {
  check_position(r, c, cfg_.domain);
  std::vector<double> q{r, c};
  Tensor query_emb = embed_position(q, cfg_.embedding);
  Tensor readout = output_attention(state.hidden, query_emb, embeddings_, cfg_.kernel);
  return decode(concat({readout, query_emb}, 0), decoder_);
}

// ---------------------------------------------------------------------------
// Baselines

void BaselineConfig::validate() const {
  if (hidden <= 0 || encoding <= 0 || enc_hidden <= 0 || dec_hidden <= 0 ||
      oracle_hidden <= 0)
    throw ConfigError("baseline extents must be positive");
  if (embedding <= 0 || embedding % 4 != 0)
    throw ConfigError("embedding size must be a positive multiple of 4 for 2D positions");
  if (!(domain > 0.0)) throw ConfigError("spatial domain must be positive");
}

BaselineConfig BaselineConfig::paper_scale() {
  BaselineConfig cfg;
  cfg.hidden = 512;
  cfg.encoding = 128;
  cfg.enc_hidden = 256;
  cfg.dec_hidden = 256;
  cfg.oracle_hidden = 512;
  return cfg;
}

Tensor baseline_aggregate(const std::vector<Crop>& obs,
                          const MlpCodecParams& joint_encoder, int embedding,
                          double domain) {
  const int out = joint_encoder.out_width();
  if (obs.empty()) return Tensor::zeros({out});
  Tensor crops = crops_to_tensor(obs);
  Tensor positions = embed_positions(crop_positions(obs, domain), embedding);
  Tensor encodings = encode_with_positions(crops, positions, joint_encoder);
  return reduce_sum_rows_ordered(encodings);
}

BaselineModel::BaselineModel(const BaselineConfig& cfg, Core core, std::uint64_t seed)
    : kind_(core == Core::kGru ? "baseline-gru" : "baseline-lstm"),
      cfg_(cfg),
      core_(core) {
  cfg_.validate();
  Rng rng(seed);
  encoder_ = make_mlp_codec("encoder", kCropArea + cfg_.embedding, cfg_.enc_hidden,
                            cfg_.encoding, rng, store_);
  if (core_ == Core::kGru)
    gru_ = make_gru("core", cfg_.encoding, cfg_.hidden, rng, store_);
  else
    lstm_ = make_lstm("core", cfg_.encoding, cfg_.hidden, rng, store_);
  decoder_ = make_mlp_codec("decoder", cfg_.hidden + cfg_.embedding, cfg_.dec_hidden,
                            kCropArea, rng, store_);
}

S2RMState BaselineModel::initial_state() const {
  if (core_ == Core::kGru) return {Tensor::zeros({cfg_.hidden}), Tensor()};
  return {Tensor::zeros({cfg_.hidden}), Tensor::zeros({cfg_.hidden})};
}

S2RMState BaselineModel::step(const S2RMState& state, const std::vector<Crop>& obs) const {
  Tensor aggregate = baseline_aggregate(obs, encoder_, cfg_.embedding, cfg_.domain);
  if (core_ == Core::kGru) return {gru_step(aggregate, state.hidden, gru_), Tensor()};
  LstmOut next = lstm_step(aggregate, state.hidden, state.memory, lstm_);
  return {next.hidden, next.memory};
}

Tensor BaselineModel::query_logits(const S2RMState& state, double r, double c) const {
  check_position(r, c, cfg_.domain);
  std::vector<double> q{r, c};
  Tensor query_emb = embed_position(q, cfg_.embedding);
  return decode(concat({state.hidden, query_emb}, 0), decoder_);
}

TtoModel::TtoModel(const BaselineConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  encoder_ = make_mlp_codec("encoder", kCropArea + cfg_.embedding, cfg_.enc_hidden,
                            cfg_.encoding, rng, store_);
  mlp_w1_ = store_.add("oracle.w1",
                       uniform_param({cfg_.encoding, cfg_.oracle_hidden}, cfg_.encoding, rng));
  mlp_b1_ = store_.add("oracle.b1", zeros_param({cfg_.oracle_hidden}));
  mlp_w2_ = store_.add("oracle.w2",
                       uniform_param({cfg_.oracle_hidden, cfg_.hidden}, cfg_.oracle_hidden, rng));
  mlp_b2_ = store_.add("oracle.b2", zeros_param({cfg_.hidden}));
  decoder_ = make_mlp_codec("decoder", cfg_.hidden + cfg_.embedding, cfg_.dec_hidden,
                            kCropArea, rng, store_);
}

S2RMState TtoModel::initial_state() const {
  return {Tensor::zeros({cfg_.hidden}), Tensor()};
}

S2RMState TtoModel::step(const S2RMState&, const std::vector<Crop>& obs) const {
  Tensor aggregate = baseline_aggregate(obs, encoder_, cfg_.embedding, cfg_.domain);
  Tensor hidden = affine(tanh(affine(aggregate, mlp_w1_, mlp_b1_)), mlp_w2_, mlp_b2_);
  return {hidden, Tensor()};
}

Tensor TtoModel::query_logits(const S2RMState& state, double r, double c) const {
  check_position(r, c, cfg_.domain);
  std::vector<double> q{r, c};
  Tensor query_emb = embed_position(q, cfg_.embedding);
  return decode(concat({state.hidden, query_emb}, 0), decoder_);
}

std::unique_ptr<ForwardModel> make_model(const std::string& kind,
                                         const S2RMConfig& s2rm_cfg,
                                         const BaselineConfig& baseline_cfg,
                                         std::uint64_t seed) {
  if (kind == "s2gru") return std::make_unique<S2GruModel>(s2rm_cfg, seed);
  if (kind == "baseline-gru")
    return std::make_unique<BaselineModel>(baseline_cfg, BaselineModel::Core::kGru, seed);
  if (kind == "baseline-lstm")
    return std::make_unique<BaselineModel>(baseline_cfg, BaselineModel::Core::kLstm, seed);
  if (kind == "tto") return std::make_unique<TtoModel>(baseline_cfg, seed);
  throw ConfigError("unknown model kind: " + kind);
}

}  // namespace s2rm
