#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "s2rm/evalsuite.hpp"
#include "s2rm/trainer.hpp"

using namespace s2rm;

namespace {

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/s2rm_eval_" + name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

S2RMConfig tiny_config() {
  S2RMConfig cfg;
  cfg.modules = 2;
  cfg.hidden = 6;
  cfg.encoding = 8;
  cfg.enc_hidden = 10;
  cfg.dec_hidden = 10;
  cfg.input_key = 4;
  cfg.input_value = 4;
  cfg.ic_key = 4;
  cfg.ic_value = 4;
  cfg.gate_hidden = 4;
  cfg.kernel = KernelConfig{1.0, 0.0};
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("balanced accuracy hand examples") {
  ConfusionCounts perfect{5, 0, 7, 0};
  CHECK(balanced_accuracy(perfect) == doctest::Approx(1.0));

  // All-zero predictions on mixed targets: recall 0, specificity 1.
  ConfusionCounts allzero{0, 0, 7, 5};
  CHECK(balanced_accuracy(allzero) == doctest::Approx(0.5));

  ConfusionCounts mixed{2, 1, 3, 2};
  CHECK(balanced_accuracy(mixed) == doctest::Approx(0.625));

  // Absent positive class: the defined term alone, flagged.
  ConfusionCounts negonly{0, 2, 8, 0};
  bool partial = false;
  CHECK(balanced_accuracy(negonly, &partial) == doctest::Approx(0.8));
  CHECK(partial);
}

TEST_CASE("f1 hand examples") {
  ConfusionCounts perfect{5, 0, 7, 0};
  CHECK(f1_score(perfect) == doctest::Approx(1.0));

  ConfusionCounts nopos{0, 0, 7, 5};
  CHECK(f1_score(nopos) == doctest::Approx(0.0));

  // P = 0.5, R = 0.75 -> F1 = 0.6: tp=3, fp=3, fn=1.
  ConfusionCounts c{3, 3, 0, 1};
  CHECK(f1_score(c) == doctest::Approx(0.6));
}

TEST_CASE("metrics agree exactly with a brute-force confusion oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(64));
    std::vector<bool> pred(n), target(n);
    for (int i = 0; i < n; ++i) {
      pred[i] = rng.uniform() < 0.5;
      target[i] = rng.uniform() < 0.4;
    }
    ConfusionCounts c;
    for (int i = 0; i < n; ++i) c.add(pred[i], target[i]);

    // Independent tally and direct formula evaluation.
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      if (pred[i] && target[i]) ++tp;
      if (pred[i] && !target[i]) ++fp;
      if (!pred[i] && !target[i]) ++tn;
      if (!pred[i] && target[i]) ++fn;
    }
    REQUIRE(c.tp == tp);
    REQUIRE(c.fp == fp);
    REQUIRE(c.tn == tn);
    REQUIRE(c.fn == fn);
    const bool has_pos = tp + fn > 0, has_neg = tn + fp > 0;
    double want_ba;
    if (has_pos && has_neg)
      want_ba = 0.5 * (static_cast<double>(tp) / (tp + fn) +
                       static_cast<double>(tn) / (tn + fp));
    else if (has_pos)
      want_ba = static_cast<double>(tp) / (tp + fn);
    else
      want_ba = has_neg ? static_cast<double>(tn) / (tn + fp) : 0.0;
    CHECK(balanced_accuracy(c) == want_ba);
    const double p = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double want_f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    CHECK(f1_score(c) == doctest::Approx(want_f1).epsilon(1e-14));
  }
}

TEST_CASE("confusion merging is order-independent") {
  Rng rng(23);
  std::vector<ConfusionCounts> parts(20);
  for (auto& p : parts) {
    p.tp = rng.uniform_int(1000);
    p.fp = rng.uniform_int(1000);
    p.tn = rng.uniform_int(1000);
    p.fn = rng.uniform_int(1000);
  }
  ConfusionCounts forward, backward;
  for (const auto& p : parts) forward.merge(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) backward.merge(*it);
  CHECK(forward.tp == backward.tp);
  CHECK(balanced_accuracy(forward) == balanced_accuracy(backward));
  CHECK(f1_score(forward) == f1_score(backward));
}

TEST_CASE("constant-zero reference scores balanced accuracy one half") {
  TempDir dir("constref");
  DatasetSpec spec;
  spec.n_seq = 4;
  spec.steps = 8;
  spec.views_per_step = 5;
  spec.master_seed = 3;
  generate_dataset(spec, dir.path + "/d.bin");
  DatasetReader data(dir.path + "/d.bin");
  EvalOptions opt;
  MetricsRow row = reference_one_step_eval(ReferenceKind::kConstantZero, data, opt);
  CHECK_FALSE(row.partial);
  CHECK(row.balanced_accuracy == doctest::Approx(0.5));
  CHECK(row.f1 == doctest::Approx(0.0));
}

TEST_CASE("copy-previous reference beats constant zero on this data") {
  TempDir dir("copyref");
  DatasetSpec spec;
  spec.n_seq = 6;
  spec.steps = 10;
  spec.views_per_step = 6;
  spec.master_seed = 5;
  generate_dataset(spec, dir.path + "/d.bin");
  DatasetReader data(dir.path + "/d.bin");
  EvalOptions opt;
  MetricsRow copy = reference_one_step_eval(ReferenceKind::kCopyPrevious, data, opt);
  MetricsRow zero = reference_one_step_eval(ReferenceKind::kConstantZero, data, opt);
  CHECK(copy.f1 > zero.f1);
  CHECK(copy.balanced_accuracy > 0.5);
}

TEST_CASE("one-step eval runs at every drop fraction and is deterministic") {
  TempDir dir("drop");
  DatasetSpec spec;
  spec.n_seq = 3;
  spec.steps = 6;
  spec.views_per_step = 4;
  spec.master_seed = 11;
  generate_dataset(spec, dir.path + "/d.bin");
  DatasetReader data(dir.path + "/d.bin");
  S2GruModel model(tiny_config(), 7);

  EvalOptions opt;
  opt.seed = 42;
  MetricsRow full = one_step_eval(model, data, opt);
  MetricsRow again = one_step_eval(model, data, opt);
  CHECK(full.balanced_accuracy == again.balanced_accuracy);
  CHECK(full.f1 == again.f1);
  CHECK(full.mean_bce == again.mean_bce);

  opt.drop_fraction = 1.0;  // zero views per step still runs
  MetricsRow none = one_step_eval(model, data, opt);
  CHECK(std::isfinite(none.mean_bce));

  opt.drop_fraction = 0.5;
  opt.threads = 3;
  MetricsRow half_mt = one_step_eval(model, data, opt);
  opt.threads = 1;
  MetricsRow half_st = one_step_eval(model, data, opt);
  CHECK(half_mt.balanced_accuracy == half_st.balanced_accuracy);
  CHECK(half_mt.f1 == half_st.f1);
}

TEST_CASE("robustness sweep emits one row per dataset and fraction") {
  TempDir dir("sweep");
  DatasetSpec spec;
  spec.n_seq = 2;
  spec.steps = 5;
  spec.views_per_step = 4;
  spec.master_seed = 13;
  generate_dataset(spec, dir.path + "/a.bin");
  spec.n_balls = 2;
  spec.master_seed = 14;
  generate_dataset(spec, dir.path + "/b.bin");
  DatasetReader da(dir.path + "/a.bin"), db(dir.path + "/b.bin");
  S2GruModel model(tiny_config(), 9);
  const std::vector<double> fractions{0.0, 0.4, 0.8};
  auto rows = robustness_sweep(model, {&da, &db}, fractions, 5, 2);
  CHECK(rows.size() == 6);
  // Zero-drop cells match the plain one-step evaluation.
  EvalOptions opt;
  opt.seed = 5;
  opt.threads = 2;
  MetricsRow direct = one_step_eval(model, da, opt);
  CHECK(rows[0].balanced_accuracy == direct.balanced_accuracy);
  CHECK(rows[0].f1 == direct.f1);
  CHECK(rows[3].n_balls == 2);

  write_metrics_csv(dir.path + "/metrics.csv", rows);
  std::string csv = slurp(dir.path + "/metrics.csv");
  CHECK(csv.rfind("dataset,n_balls,drop_fraction,balanced_accuracy,f1,mean_bce\n", 0) == 0);
  int lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 7);  // header + 6 rows
}

TEST_CASE("stitch grid geometry") {
  std::vector<std::vector<double>> ones(16, std::vector<double>(kCropArea, 1.0));
  std::vector<double> image = stitch_grid(ones);
  int painted = 0;
  for (double v : image) painted += v == 1.0 ? 1 : 0;
  CHECK(painted == 16 * kCropArea);  // 1936 painted pixels
  // Seam rows/cols stay zero.
  for (int i = 0; i < kFrameSize; ++i) {
    CHECK(image[0 * kFrameSize + i] == 0.0);
    CHECK(image[12 * kFrameSize + i] == 0.0);
    CHECK(image[i * kFrameSize + 24] == 0.0);
    CHECK(image[i * kFrameSize + 36] == 0.0);
  }
  std::vector<std::vector<double>> zeros(16, std::vector<double>(kCropArea, 0.0));
  for (double v : stitch_grid(zeros)) CHECK(v == 0.0);
  CHECK_THROWS_AS(stitch_grid({{1.0}}), DimensionError);
}

TEST_CASE("rollout with the ground-truth stub reproduces stitched frames exactly") {
  DatasetSpec spec;
  spec.n_seq = 1;
  spec.steps = 45;
  spec.views_per_step = 10;
  spec.n_balls = 2;
  spec.master_seed = 21;
  SequenceViews episode = make_sequence(spec, derive_seed(spec.master_seed, 0));

  OracleRollout oracle(episode);
  RolloutConfig cfg;
  cfg.seed = 77;
  RolloutResult result = rollout(oracle, episode, cfg);
  REQUIRE(result.prompt.size() == 20);
  REQUIRE(result.rollout.size() == 25);

  auto check_record = [&](const RolloutRecord& rec) {
    const Frame& truth = episode.frames[rec.step - 1];
    const auto centers = stitch_grid_centers();
    // Painted pixels equal ground truth; everything else is zero.
    std::vector<bool> painted(kFrameSize * kFrameSize, false);
    const int half = kCropSize / 2;
    for (const auto& [cr, cc] : centers)
      for (int r = cr - half; r <= cr + half; ++r)
        for (int c = cc - half; c <= cc + half; ++c)
          painted[r * kFrameSize + c] = true;
    for (int i = 0; i < kFrameSize * kFrameSize; ++i) {
      if (painted[i])
        CHECK(rec.stitched[i] == static_cast<double>(truth.px[i]));
      else
        CHECK(rec.stitched[i] == 0.0);
    }
  };
  for (const RolloutRecord& rec : result.prompt) check_record(rec);
  for (const RolloutRecord& rec : result.rollout) check_record(rec);
}

TEST_CASE("rollouts are deterministic and share centers across models") {
  DatasetSpec spec;
  spec.n_seq = 1;
  spec.steps = 45;
  spec.views_per_step = 6;
  spec.master_seed = 31;
  SequenceViews episode = make_sequence(spec, derive_seed(spec.master_seed, 0));
  RolloutConfig cfg;
  cfg.views = 6;
  cfg.seed = 99;

  S2GruModel model(tiny_config(), 41);
  ForwardRollout fr1(model), fr2(model);
  RolloutResult a = rollout(fr1, episode, cfg);
  RolloutResult b = rollout(fr2, episode, cfg);
  REQUIRE(a.rollout.size() == b.rollout.size());
  for (std::size_t i = 0; i < a.rollout.size(); ++i) {
    CHECK(a.rollout[i].view_centers == b.rollout[i].view_centers);
    CHECK(a.rollout[i].stitched == b.rollout[i].stitched);
  }

  // A different model under the same seed sees the same center stream.
  OracleRollout oracle(episode);
  RolloutResult c = rollout(oracle, episode, cfg);
  for (std::size_t i = 0; i < a.prompt.size(); ++i)
    CHECK(a.prompt[i].view_centers == c.prompt[i].view_centers);

  // Too-short episodes are rejected.
  DatasetSpec short_spec = spec;
  short_spec.steps = 30;
  SequenceViews short_ep = make_sequence(short_spec, 1);
  CHECK_THROWS_AS(rollout(fr1, short_ep, cfg), InputError);
}

TEST_CASE("enclave maps stay within the kernel range") {
  ParamStore store;
  Tensor rows = make_module_embeddings(3, 16, 5, store);
  KernelConfig cfg{1.0, 0.6};
  auto maps = enclave_map(rows, cfg, 16);
  REQUIRE(maps.size() == 3);
  for (const auto& img : maps)
    for (double v : img) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }

  // A module embedding equal to some pixel embedding scores 1 there.
  std::vector<double> x{10.0, 20.0};
  Tensor target = embed_position(x, 16);
  auto data = store.at("module_embeddings").mutable_data();
  for (int j = 0; j < 16; ++j) data[j] = target.data()[j];
  auto maps2 = enclave_map(store.at("module_embeddings"), cfg, 16);
  CHECK(maps2[0][10 * kFrameSize + 20] == doctest::Approx(1.0));

  // Pixels whose dot product falls below the truncation render exactly zero.
  bool found_zero = false;
  for (double v : maps2[0]) found_zero = found_zero || v == 0.0;
  CHECK(found_zero);
}

TEST_CASE("pgm writer emits a valid 8-bit P5 file") {
  TempDir dir("pgm");
  std::vector<double> image(kFrameSize * kFrameSize, 0.0);
  image[0] = 1.0;
  image[1] = 0.5;
  write_pgm(dir.path + "/img.pgm", image);
  std::string bytes = slurp(dir.path + "/img.pgm");
  const std::string header = "P5\n48 48\n255\n";
  REQUIRE(bytes.rfind(header, 0) == 0);
  CHECK(bytes.size() == header.size() + kFrameSize * kFrameSize);
  CHECK(static_cast<unsigned char>(bytes[header.size()]) == 255);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 1]) == 128);
  CHECK(static_cast<unsigned char>(bytes[header.size() + 2]) == 0);
}
