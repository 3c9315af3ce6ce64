#pragma once

#include <string>

#include "s2rm/geometry.hpp"
#include "s2rm/rng.hpp"
#include "s2rm/tensor.hpp"

// Kernel-gated multi-head dot-product attention: the observation-to-module
// pathway, the module-to-module aggregation, and the kernel-weighted readout.

namespace s2rm {

struct AttentionParams {
  Tensor query_proj;  // (in_q, heads, key)
  Tensor key_proj;    // (in_k, heads, key)
  Tensor value_proj;  // (in_v, heads, value)
  Tensor out_proj;    // (heads * value, out); flattened heads back to width
};

// Two-layer MLP with sigmoid output producing one mixing scalar per row from
// concat(candidate, bypass).
struct GateParams {
  Tensor w1, b1;  // (2 * width, hidden), (hidden)
  Tensor w2, b2;  // (hidden, 1), (1)
};

struct AttentionOptions {
  // Mask scores where the kernel is zero before the softmax instead of only
  // multiplying afterwards. Off by default: the reference pipeline lets
  // distant observations influence the softmax normalization.
  bool presoftmax_mask = false;
  // Divide dot-product scores by sqrt(key size). Off by default (scores are
  // used unscaled).
  bool scale_scores = false;
};

// Intermediate values, exposed for tests and diagnostics.
struct AttentionTrace {
  Tensor scores;     // (M, A, heads) pre-softmax
  Tensor softmaxed;  // (M, A, heads) rows summing to 1 over A
  Tensor weights;    // (M, A, heads) after kernel gating
  Tensor candidate;  // (M, out) attended + projected
  Tensor bypass;     // (M, out) kernel-weighted sum
  Tensor gate;       // (M, 1)
};

AttentionParams make_attention_params(const std::string& prefix, int in_q,
                                      int in_k, int in_v, int heads, int key,
                                      int value, int out, Rng& rng,
                                      ParamStore& store);
GateParams make_gate_params(const std::string& prefix, int width, int hidden,
                            Rng& rng, ParamStore& store);

struct Gated {
  Tensor gate;      // per-row scalar in (0,1)
  Tensor combined;  // gate * bypass + (1 - gate) * candidate
};

// Accepts a single row (rank 1) or a batch of rows (rank 2).
Gated gate(const Tensor& candidate, const Tensor& bypass, const GateParams& p);

// Maps the set of observation encodings (A, E) to per-module inputs (M, E).
// Queries and values come from the encodings, keys from the hidden states
// (M, H); `local` is the (M, A) kernel weight matrix.
Tensor input_attention(const Tensor& encodings, const Tensor& hidden,
                       const Tensor& local, const AttentionParams& p,
                       const GateParams& g, const AttentionOptions& opt = {},
                       AttentionTrace* trace = nullptr);

// The A = 0 case: candidate and bypass are zero vectors and the gate still
// runs, so the result is a zero (M, width) input.
Tensor input_attention_empty(int modules, int width, const GateParams& g);

// Aggregated hidden states (M, H) from hidden states (M, H); queries, keys
// and values all come from `hidden`, `local` is the (M, M) module-pair kernel
// matrix.
Tensor inter_cell_attention(const Tensor& hidden, const Tensor& local,
                            const AttentionParams& p, const GateParams& g,
                            const AttentionOptions& opt = {},
                            AttentionTrace* trace = nullptr);

// Kernel-weighted readout (no softmax, no parameters): sum over modules of
// Z(query_embedding, module_row) * hidden_row.
Tensor output_attention(const Tensor& hidden, const Tensor& query_embedding,
                        const Tensor& module_rows, const KernelConfig& cfg);

}  // namespace s2rm
