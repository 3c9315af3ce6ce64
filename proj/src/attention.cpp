#include "s2rm/attention.hpp"

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

}  // namespace

AttentionParams make_attention_params(const std::string& prefix, int in_q,
                                      int in_k, int in_v, int heads, int key,
                                      int value, int out, Rng& rng,
                                      ParamStore& store) {
  AttentionParams p;
  p.query_proj = store.add(prefix + ".query_proj", uniform_param({in_q, heads, key}, in_q, rng));
  p.key_proj = store.add(prefix + ".key_proj", uniform_param({in_k, heads, key}, in_k, rng));
  p.value_proj = store.add(prefix + ".value_proj", uniform_param({in_v, heads, value}, in_v, rng));
  p.out_proj = store.add(prefix + ".out_proj", uniform_param({heads * value, out}, heads * value, rng));
  return p;
}

GateParams make_gate_params(const std::string& prefix, int width, int hidden,
                            Rng& rng, ParamStore& store) {
  GateParams p;
  p.w1 = store.add(prefix + ".w1", uniform_param({2 * width, hidden}, 2 * width, rng));
  p.b1 = store.add(prefix + ".b1", Tensor::param({hidden}, std::vector<double>(hidden, 0.0)));
  p.w2 = store.add(prefix + ".w2", uniform_param({hidden, 1}, hidden, rng));
  p.b2 = store.add(prefix + ".b2", Tensor::param({1}, {0.0}));
  return p;
}

Gated gate(const Tensor& candidate, const Tensor& bypass, const GateParams& p) {
  if (candidate.shape() != bypass.shape())
    throw DimensionError("gate candidate and bypass widths differ");
  const int axis = candidate.rank() == 1 ? 0 : 1;
  Tensor gin = concat({candidate, bypass}, axis);
  Tensor hid = tanh(affine(gin, p.w1, p.b1));
  Tensor g = sigmoid(affine(hid, p.w2, p.b2));
  Tensor combined = add(mul(g, bypass), mul(scale_shift(g, -1.0, 1.0), candidate));
  return {g, combined};
}

namespace {

// Shared pipeline: queries/values from `source`, keys from `keyed`, softmax
// over the source axis, kernel gating, head flattening and projection, then
// the gated combination with the kernel-weighted bypass.
Tensor gated_attention(const Tensor& source, const Tensor& keyed,
                       const Tensor& local, const AttentionParams& p,
                       const GateParams& gp, const AttentionOptions& opt,
                       AttentionTrace* trace) {
  const int n_src = source.extent(0);
  const int n_dst = keyed.extent(0);
  if (p.query_proj.extent(0) != source.extent(1) ||
      p.value_proj.extent(0) != source.extent(1) ||
      p.key_proj.extent(0) != keyed.extent(1))
    throw DimensionError("attention projection widths do not match operands");
  if (p.query_proj.extent(1) != p.key_proj.extent(1) ||
      p.query_proj.extent(2) != p.key_proj.extent(2) ||
      p.value_proj.extent(1) != p.query_proj.extent(1))
    throw DimensionError("query/key/value head shapes are inconsistent");
  if (local.rank() != 2 || local.extent(0) != n_dst || local.extent(1) != n_src)
    throw DimensionError("local weight matrix has the wrong shape");
  const int heads = p.value_proj.extent(1);
  const int value = p.value_proj.extent(2);
  if (p.out_proj.extent(0) != heads * value)
    throw DimensionError("out_proj input width must be heads * value");

  Tensor queries = contract("ai,ikd->akd", source, p.query_proj);
  Tensor keys = contract("mj,jkd->mkd", keyed, p.key_proj);
  Tensor values = contract("ai,ikv->akv", source, p.value_proj);
  Tensor scores = contract("akd,mkd->mak", queries, keys);
  if (opt.scale_scores)
    scores = scale_shift(scores, 1.0 / std::sqrt(static_cast<double>(p.query_proj.extent(2))), 0.0);
  if (opt.presoftmax_mask) {
    std::vector<double> mask(static_cast<std::size_t>(n_dst) * n_src, 0.0);
    for (std::int64_t i = 0; i < local.size(); ++i)
      if (local.data()[i] == 0.0) mask[i] = -1e30;
    scores = add(scores, reshape(Tensor::from({n_dst, n_src}, std::move(mask)),
                                 {n_dst, n_src, 1}));
  }
  Tensor softmaxed = softmax(scores, 1);
  Tensor weights = mul(softmaxed, reshape(local, {n_dst, n_src, 1}));
  Tensor attended = contract("mak,akv->mkv", weights, values);
  Tensor candidate = contract("mf,fe->me", reshape(attended, {n_dst, heads * value}), p.out_proj);
  Tensor bypass = contract("ma,ae->me", local, source);
  if (candidate.shape() != bypass.shape())
    throw DimensionError("out_proj width must match the bypass width");
  Gated gg = gate(candidate, bypass, gp);
  if (trace != nullptr)
    *trace = {scores, softmaxed, weights, candidate, bypass, gg.gate};
  return gg.combined;
}

}  // namespace

Tensor input_attention(const Tensor& encodings, const Tensor& hidden,
                       const Tensor& local, const AttentionParams& p,
                       const GateParams& g, const AttentionOptions& opt,
                       AttentionTrace* trace) {
  return gated_attention(encodings, hidden, local, p, g, opt, trace);
}

Tensor input_attention_empty(int modules, int width, const GateParams& g) {
  Tensor zeros = Tensor::zeros({modules, width});
  return gate(zeros, zeros, g).combined;
}

Tensor inter_cell_attention(const Tensor& hidden, const Tensor& local,
                            const AttentionParams& p, const GateParams& g,
                            const AttentionOptions& opt, AttentionTrace* trace) {
  return gated_attention(hidden, hidden, local, p, g, opt, trace);
}

Tensor output_attention(const Tensor& hidden, const Tensor& query_embedding,
                        const Tensor& module_rows, const KernelConfig& cfg) {
  Tensor dots = contract("md,d->m", module_rows, query_embedding);
  Tensor z = kernel_gate(dots, cfg);
  return contract("m,mj->j", z, hidden);
}

}  // namespace s2rm
