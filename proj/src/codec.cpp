#include "s2rm/codec.hpp"

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

Tensor mlp_apply(const Tensor& x, const MlpCodecParams& p) {
  return affine(tanh(affine(x, p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace

MlpCodecParams make_mlp_codec(const std::string& prefix, int in, int hidden,
                              int out, Rng& rng, ParamStore& store) {
  MlpCodecParams p;
  p.w1 = store.add(prefix + ".w1", uniform_param({in, hidden}, in, rng));
  p.b1 = store.add(prefix + ".b1", Tensor::param({hidden}, std::vector<double>(hidden, 0.0)));
  p.w2 = store.add(prefix + ".w2", uniform_param({hidden, out}, hidden, rng));
  p.b2 = store.add(prefix + ".b2", Tensor::param({out}, std::vector<double>(out, 0.0)));
  return p;
}

Tensor crops_to_tensor(const std::vector<Crop>& crops) {
  if (crops.empty()) throw DimensionError("crops_to_tensor on an empty set");
  std::vector<double> data;
  data.reserve(crops.size() * kCropArea);
  for (const Crop& c : crops) {
    if (static_cast<int>(c.values.size()) != kCropArea)
      throw DimensionError("crop must hold " + std::to_string(kCropArea) + " values");
    for (double v : c.values) {
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("crop value outside [0, 1]");
      data.push_back(v);
    }
  }
  return Tensor::from({static_cast<int>(crops.size()), kCropArea}, std::move(data));
}

Tensor encode(const Tensor& crops, const MlpCodecParams& p) {
  const int width = crops.rank() == 2 ? crops.extent(1) : crops.extent(0);
  if (width != p.in_width())
    throw DimensionError("encoder expects input width " + std::to_string(p.in_width()));
  return mlp_apply(crops, p);
}

Tensor encode_with_positions(const Tensor& crops, const Tensor& pos_rows,
                             const MlpCodecParams& p) {
  if (crops.rank() != 2 || pos_rows.rank() != 2 ||
      crops.extent(0) != pos_rows.extent(0))
    throw DimensionError("joint encoder needs matching crop and position row counts");
  return encode(concat({crops, pos_rows}, 1), p);
}

Tensor decode(const Tensor& z, const MlpCodecParams& p) {
  const int width = z.rank() == 2 ? z.extent(1) : z.extent(0);
  if (width != p.in_width())
    throw DimensionError("decoder expects input width " + std::to_string(p.in_width()));
  return mlp_apply(z, p);
}

}  // namespace s2rm
