#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "s2rm/codec.hpp"
#include "s2rm/rng.hpp"
#include "s2rm/tensor.hpp"

using namespace s2rm;

namespace {

void zero_all(ParamStore& store) {
  for (std::size_t i = 0; i < store.count(); ++i) {
    auto d = store.tensor(i).mutable_data();
    std::fill(d.begin(), d.end(), 0.0);
  }
}

}  // namespace

TEST_CASE("zero crop through a zero-initialized encoder is bias-only") {
  ParamStore store;
  Rng rng(1);
  MlpCodecParams enc = make_mlp_codec("enc", kCropArea, 16, 8, rng, store);
  zero_all(store);
  auto b2 = enc.b2.mutable_data();
  for (int i = 0; i < 8; ++i) b2[i] = 0.25 * i;
  Tensor crop = Tensor::zeros({kCropArea});
  Tensor e = encode(crop, enc);
  for (int i = 0; i < 8; ++i) CHECK(e.data()[i] == doctest::Approx(0.25 * i));
}

TEST_CASE("identical crops encode identically; width follows the config") {
  ParamStore store;
  Rng rng(2);
  MlpCodecParams enc = make_mlp_codec("enc", kCropArea, 256, 128, rng, store);
  std::vector<Crop> crops(2);
  Rng pix(3);
  crops[0].row = crops[0].col = 10;
  crops[0].values.resize(kCropArea);
  for (auto& v : crops[0].values) v = pix.uniform() < 0.2 ? 1.0 : 0.0;
  crops[1] = crops[0];
  crops[1].row = 30;  // position is not part of the crop-only encoder input
  Tensor e = encode(crops_to_tensor(crops), enc);
  CHECK(e.shape() == Shape{2, 128});
  for (int j = 0; j < 128; ++j) CHECK(e.data()[j] == e.data()[128 + j]);
}

TEST_CASE("decoder on zero input with zero parameters gives 0.5 probabilities") {
  ParamStore store;
  Rng rng(4);
  MlpCodecParams dec = make_mlp_codec("dec", 12, 16, kCropArea, rng, store);
  zero_all(store);
  Tensor logits = decode(Tensor::zeros({12}), dec);
  CHECK(logits.shape() == Shape{kCropArea});
  for (double v : logits.data()) {
    CHECK(v == 0.0);
    CHECK(1.0 / (1.0 + std::exp(-v)) == doctest::Approx(0.5));
  }
}

TEST_CASE("decode is deterministic and rejects width mismatches") {
  ParamStore store;
  Rng rng(5);
  MlpCodecParams dec = make_mlp_codec("dec", 10, 16, kCropArea, rng, store);
  Tensor z = Tensor::constant({10}, 0.3);
  Tensor a = decode(z, dec), b = decode(z, dec);
  for (int i = 0; i < kCropArea; ++i) CHECK(a.data()[i] == b.data()[i]);
  CHECK_THROWS_AS(decode(Tensor::zeros({11}), dec), DimensionError);
  CHECK_THROWS_AS(encode(Tensor::zeros({kCropArea + 1}), dec), DimensionError);
}

TEST_CASE("crops_to_tensor validates shape and range") {
  Crop bad_size;
  bad_size.values.assign(kCropArea - 1, 0.0);
  CHECK_THROWS_AS(crops_to_tensor({bad_size}), DimensionError);
  Crop bad_value;
  bad_value.values.assign(kCropArea, 0.0);
  bad_value.values[5] = 1.5;
  CHECK_THROWS_AS(crops_to_tensor({bad_value}), InputError);
}

TEST_CASE("encode/decode composition passes grad_check against a BCE loss") {
  ParamStore store;
  Rng rng(6);
  MlpCodecParams enc = make_mlp_codec("enc", kCropArea, 8, 6, rng, store);
  MlpCodecParams dec = make_mlp_codec("dec", 6, 8, kCropArea, rng, store);
  Rng pix(7);
  std::vector<double> crop(kCropArea), target(kCropArea);
  for (auto& v : crop) v = pix.uniform() < 0.3 ? 1.0 : 0.0;
  for (auto& v : target) v = pix.uniform() < 0.3 ? 1.0 : 0.0;
  Tensor crop_t = Tensor::from({kCropArea}, crop);
  Tensor target_t = Tensor::from({kCropArea}, target);

  auto pipeline = [&]() {
    return bce_with_logits_mean(decode(encode(crop_t, enc), dec), target_t);
  };
  for (const char* name : {"enc.w1", "enc.b1", "enc.w2", "dec.w1", "dec.w2", "dec.b2"}) {
    auto f = [&](Tensor&) { return pipeline(); };
    CHECK(grad_check(f, store.at(name), 1e-5) < 1e-5);
  }
}
