#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "s2rm/tensor.hpp"

// Unit-sphere positional embeddings and the truncated spherical Gaussian
// kernel that gates every attention pathway in the model.

namespace s2rm {

struct KernelConfig {
  double bandwidth = 1.0;   // >= 0; zero disables the distance attenuation
  double truncation = 0.6;  // in [-1, 1); cosine similarity below this maps to 0
  void validate() const;
};

// Raw sinusoid features before normalization. For input dimension m of n and
// frequency slot i of n_freq = d/(2n), positions (m*n_freq + i)*2 and the one
// after hold sin(x_m / scale_i) and cos(x_m / scale_i), with the geometric
// ladder scale_i = 10000^(i / n_freq).
std::vector<double> sinusoid_features(std::span<const double> x, int d);

// L2-normalized point on the unit sphere in R^d; d must be a positive
// multiple of 2 * len(x). Deterministic and continuous in x.
Tensor embed_position(std::span<const double> x, int d);

// Batch variant: one point per row of `points` (each of dimension n), output
// is (len(points), d).
Tensor embed_positions(const std::vector<std::vector<double>>& points, int d);

// Similarity of two unit vectors: exp(-2*eps*(1 - p.s)) if p.s >= tau else 0.
double kernel(std::span<const double> p, std::span<const double> s,
              const KernelConfig& cfg);

// Elementwise kernel over a tensor of dot products. Forward truncates; the
// backward pass uses the untruncated exponential's derivative everywhere,
// including where the forward value is zero.
Tensor kernel_gate(const Tensor& dots, const KernelConfig& cfg);

// Local weight matrix: entry (m, a) is the kernel applied to the dot product
// of row m of `p_rows` with row a of `s_rows`. Differentiable in both.
Tensor kernel_batch(const Tensor& p_rows, const Tensor& s_rows,
                    const KernelConfig& cfg);

// Learnable unit-norm module embedding rows (modules x d), registered in the
// given store. Rows are initialized uniformly on the sphere from the seed.
Tensor make_module_embeddings(int modules, int d, std::uint64_t seed,
                              ParamStore& store,
                              const std::string& name = "module_embeddings");

// Projects every row of a (M, d) parameter back onto the unit sphere in
// place. Used after each optimizer step; requires exclusive access.
void renormalize_embeddings(Tensor& rows);

}  // namespace s2rm
