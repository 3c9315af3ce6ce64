#pragma once

#include <string>
#include <vector>

#include "s2rm/rng.hpp"
#include "s2rm/tensor.hpp"

// Observation encoder/decoder for binary 11x11 crops. The default codec is a
// two-layer tanh MLP on the flattened crop; anything honoring the same call
// shapes (flattened crop in, per-pixel logits out) can replace it.

namespace s2rm {

inline constexpr int kCropSize = 11;
inline constexpr int kCropArea = kCropSize * kCropSize;

// One observation window: pixel values with the frame position of its center.
struct Crop {
  int row = 0;
  int col = 0;
  std::vector<double> values;  // kCropArea reals in [0, 1], row-major
};

struct MlpCodecParams {
  Tensor w1, b1, w2, b2;
  int in_width() const { return w1.extent(0); }
  int out_width() const { return w2.extent(1); }
};

MlpCodecParams make_mlp_codec(const std::string& prefix, int in, int hidden,
                              int out, Rng& rng, ParamStore& store);

// Packs crops into an (A, kCropArea) constant tensor; validates sizes and the
// [0, 1] value range.
Tensor crops_to_tensor(const std::vector<Crop>& crops);

// (A, kCropArea) -> (A, E); also accepts a single flattened crop (rank 1).
Tensor encode(const Tensor& crops, const MlpCodecParams& p);

// Joint variant used by the additive-aggregation baseline: the position
// embedding rows are concatenated to the flattened crops at the input.
Tensor encode_with_positions(const Tensor& crops, const Tensor& pos_rows,
                             const MlpCodecParams& p);

// Representation -> kCropArea logits (sigmoid applied downstream).
Tensor decode(const Tensor& z, const MlpCodecParams& p);

}  // namespace s2rm
