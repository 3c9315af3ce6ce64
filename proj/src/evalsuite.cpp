#include "s2rm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <thread>

#include "s2rm/errors.hpp"
#include "s2rm/geometry.hpp"

namespace s2rm {

// ---------------------------------------------------------------------------
// Metrics

void ConfusionCounts::add(bool predicted, bool target) {
  if (target)
    predicted ? ++tp : ++fn;
  else
    predicted ? ++fp : ++tn;
}

void ConfusionCounts::merge(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
}

double balanced_accuracy(const ConfusionCounts& c, bool* partial) {
  const bool has_pos = c.tp + c.fn > 0;
  const bool has_neg = c.tn + c.fp > 0;
  if (partial != nullptr) *partial = !(has_pos && has_neg);
  const double recall = has_pos ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
  const double specificity = has_neg ? static_cast<double>(c.tn) / (c.tn + c.fp) : 0.0;
  if (has_pos && has_neg) return 0.5 * (recall + specificity);
  if (has_pos) return recall;
  if (has_neg) return specificity;
  return 0.0;
}

double f1_score(const ConfusionCounts& c) {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

// ---------------------------------------------------------------------------
// One-step protocol

namespace {

double stable_bce(double logit, double target) {
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

int kept_view_count(double drop_fraction, int available) {
  if (!(drop_fraction >= 0.0 && drop_fraction <= 1.0))
    throw InputError("drop fraction must lie in [0, 1]");
  return static_cast<int>(std::ceil((1.0 - drop_fraction) * available));
}

std::vector<Crop> subsample_views(const std::vector<Crop>& views, int keep, Rng& rng) {
  const int n = static_cast<int>(views.size());
  if (keep >= n) return views;
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < keep; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[i], idx[j]);
  }
  std::vector<Crop> kept;
  kept.reserve(keep);
  for (int i = 0; i < keep; ++i) kept.push_back(views[idx[i]]);
  return kept;
}

void strided_parallel(int count, int threads, const std::function<void(int)>& fn) {
  const int workers = std::max(1, std::min(threads, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < count; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct SequenceEval {
  ConfusionCounts confusion;
  double bce_sum = 0.0;
  std::uint64_t pixel_count = 0;
};

// Per-query prediction hook: fills 121 logits for the crop at (row, col).
using Predictor = std::function<void(const SequenceViews& seq, std::size_t t_next,
                                     int row, int col, std::vector<double>& logits)>;

MetricsRow pooled_eval(const DatasetReader& data, const EvalOptions& opt,
                       const std::function<SequenceEval(int)>& eval_one) {
  const int n = static_cast<int>(data.header().n_seq);
  if (n == 0) throw InputError("empty dataset");
  std::vector<SequenceEval> partials(n);
  strided_parallel(n, opt.threads, [&](int i) { partials[i] = eval_one(i); });
  SequenceEval total;
  for (const SequenceEval& p : partials) {
    total.confusion.merge(p.confusion);
    total.bce_sum += p.bce_sum;
    total.pixel_count += p.pixel_count;
  }
  MetricsRow row;
  row.dataset = opt.label.empty() ? data.path() : opt.label;
  row.n_balls = static_cast<int>(data.header().n_balls);
  row.drop_fraction = opt.drop_fraction;
  row.balanced_accuracy = balanced_accuracy(total.confusion, &row.partial);
  row.f1 = f1_score(total.confusion);
  row.mean_bce = total.pixel_count ? total.bce_sum / static_cast<double>(total.pixel_count) : 0.0;
  if (row.partial)
    std::cerr << "warning: dataset " << row.dataset
              << " lacks one target class; reporting the defined term alone\n";
  return row;
}

SequenceEval eval_sequence_with(const SequenceViews& seq, const EvalOptions& opt,
                                std::uint64_t subsample_stream, bool use_future_views,
                                const std::function<void(const std::vector<Crop>&)>& feed,
                                const Predictor& predict) {
  SequenceEval out;
  std::vector<double> logits(kCropArea);
  const std::size_t steps = seq.frames.size();
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    const std::vector<Crop>& available = use_future_views ? seq.views[t + 1] : seq.views[t];
    const int keep = kept_view_count(opt.drop_fraction, static_cast<int>(available.size()));
    Rng rng(derive_seed(subsample_stream, t));
    feed(subsample_views(available, keep, rng));
    for (const Crop& target : seq.views[t + 1]) {
      predict(seq, t + 1, target.row, target.col, logits);
      for (int px = 0; px < kCropArea; ++px) {
        const bool pred = logits[px] >= 0.0;  // sigmoid(logit) >= 0.5
        const bool truth = target.values[px] >= 0.5;
        out.confusion.add(pred, truth);
        out.bce_sum += stable_bce(logits[px], truth ? 1.0 : 0.0);
        ++out.pixel_count;
      }
    }
  }
  return out;
}

}  // namespace

MetricsRow one_step_eval(const ForwardModel& model, const DatasetReader& data,
                         const EvalOptions& opt) {
  return pooled_eval(data, opt, [&](int i) {
    const SequenceViews seq = data.load(i);
    S2RMState state = model.initial_state();
    auto feed = [&](const std::vector<Crop>& kept) { state = model.step(state, kept); };
    Predictor predict = [&](const SequenceViews&, std::size_t, int row, int col,
                            std::vector<double>& logits) {
      const Tensor q = model.query_logits(state, row, col);
      std::copy(q.data().begin(), q.data().end(), logits.begin());
    };
    return eval_sequence_with(seq, opt, derive_seed(opt.seed, static_cast<std::uint64_t>(i)),
                              model.wants_future(), feed, predict);
  });
}

MetricsRow reference_one_step_eval(ReferenceKind kind, const DatasetReader& data,
                                   const EvalOptions& opt) {
  // Binary reference predictions are mapped to saturated logits, so the BCE
  // column stays finite (the references exist for accuracy/F1 comparisons).
  const double kSaturated = 16.0;
  return pooled_eval(data, opt, [&](int i) {
    const SequenceViews seq = data.load(i);
    auto feed = [](const std::vector<Crop>&) {};
    Predictor predict = [&](const SequenceViews& s, std::size_t t_next, int row, int col,
                            std::vector<double>& logits) {
      if (kind == ReferenceKind::kConstantZero) {
        std::fill(logits.begin(), logits.end(), -kSaturated);
        return;
      }
      const Crop prev = crop_at(s.frames[t_next - 1], row, col);
      for (int px = 0; px < kCropArea; ++px)
        logits[px] = prev.values[px] >= 0.5 ? kSaturated : -kSaturated;
    };
    return eval_sequence_with(seq, opt, derive_seed(opt.seed, static_cast<std::uint64_t>(i)),
                              false, feed, predict);
  });
}

std::vector<MetricsRow> robustness_sweep(const ForwardModel& model,
                                         const std::vector<const DatasetReader*>& datasets,
                                         const std::vector<double>& fractions,
                                         std::uint64_t seed, int threads) {
  std::vector<MetricsRow> rows;
  for (const DatasetReader* data : datasets)
    for (double f : fractions) {
      EvalOptions opt;
      opt.drop_fraction = f;
      opt.seed = seed;
      opt.threads = threads;
      rows.push_back(one_step_eval(model, *data, opt));
    }
  return rows;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write metrics file " + path);
  out << "dataset,n_balls,drop_fraction,balanced_accuracy,f1,mean_bce\n";
  char line[512];
  for (const MetricsRow& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%d,%.3g,%.6f,%.6f,%.6f\n", r.dataset.c_str(),
                  r.n_balls, r.drop_fraction, r.balanced_accuracy, r.f1, r.mean_bce);
    out << line;
  }
  if (!out) throw Error("failed writing metrics file " + path);
}

// ---------------------------------------------------------------------------
// Rollouts

ForwardRollout::ForwardRollout(const ForwardModel& model)
    : model_(model), state_(model.initial_state()) {}

void ForwardRollout::reset() { state_ = model_.initial_state(); }

void ForwardRollout::feed(const std::vector<Crop>& obs) {
  state_ = model_.step(state_, obs);
}

std::vector<double> ForwardRollout::predict_probs(int row, int col) const {
  const Tensor logits = model_.query_logits(state_, row, col);
  std::vector<double> probs(logits.data().begin(), logits.data().end());
  for (double& v : probs) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return probs;
}

OracleRollout::OracleRollout(const SequenceViews& episode) : episode_(episode) {}

void OracleRollout::reset() { fed_ = 0; }

void OracleRollout::feed(const std::vector<Crop>&) { ++fed_; }

std::vector<double> OracleRollout::predict_probs(int row, int col) const {
  if (fed_ + 1 > episode_.frames.size())
    throw InputError("oracle queried past the end of its episode");
  return crop_at(episode_.frames[fed_], row, col).values;
}

std::vector<std::pair<int, int>> stitch_grid_centers() {
  std::vector<std::pair<int, int>> centers;
  for (int r : {6, 18, 30, 42})
    for (int c : {6, 18, 30, 42}) centers.emplace_back(r, c);
  return centers;
}

std::vector<double> stitch_grid(const std::vector<std::vector<double>>& crops) {
  const auto centers = stitch_grid_centers();
  if (crops.size() != centers.size())
    throw DimensionError("stitch_grid expects exactly 16 crops");
  std::vector<double> image(kFrameSize * kFrameSize, 0.0);
  const int half = kCropSize / 2;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    if (static_cast<int>(crops[i].size()) != kCropArea)
      throw DimensionError("stitch_grid crop has the wrong size");
    const auto [cr, cc] = centers[i];
    for (int r = 0; r < kCropSize; ++r)
      for (int c = 0; c < kCropSize; ++c)
        image[(cr - half + r) * kFrameSize + (cc - half + c)] =
            crops[i][r * kCropSize + c];
  }
  return image;
}

RolloutResult rollout(RolloutModel& model, const SequenceViews& episode,
                      const RolloutConfig& cfg) {
  const int total = cfg.prompt_steps + cfg.rollout_steps;
  if (static_cast<int>(episode.frames.size()) < total)
    throw InputError("episode holds " + std::to_string(episode.frames.size()) +
                     " frames, protocol needs " + std::to_string(total));
  model.reset();
  Rng rng(derive_seed(cfg.seed, 0x9017));
  const auto grid = stitch_grid_centers();
  const int span = kViewCenterMax - kViewCenterMin + 1;
  RolloutResult result;
  for (int step = 1; step <= total; ++step) {
    RolloutRecord record;
    record.step = step;
    // Stitched prediction of frame `step` from the pre-feed state.
    std::vector<std::vector<double>> grid_crops;
    grid_crops.reserve(grid.size());
    for (const auto& [r, c] : grid) grid_crops.push_back(model.predict_probs(r, c));
    record.stitched = stitch_grid(grid_crops);

    // Fresh random centers for this step's observations.
    record.view_centers.reserve(cfg.views);
    for (int a = 0; a < cfg.views; ++a) {
      const int r = kViewCenterMin + static_cast<int>(rng.uniform_int(span));
      const int c = kViewCenterMin + static_cast<int>(rng.uniform_int(span));
      record.view_centers.emplace_back(r, c);
    }
    std::vector<Crop> obs;
    obs.reserve(cfg.views);
    if (step <= cfg.prompt_steps) {
      for (const auto& [r, c] : record.view_centers)
        obs.push_back(crop_at(episode.frames[step - 1], r, c));
    } else {
      for (const auto& [r, c] : record.view_centers) {
        Crop fed;
        fed.row = r;
        fed.col = c;
        fed.values = model.predict_probs(r, c);
        for (double& v : fed.values) v = v >= 0.5 ? 1.0 : 0.0;
        obs.push_back(std::move(fed));
      }
    }
    model.feed(obs);
    if (step <= cfg.prompt_steps)
      result.prompt.push_back(std::move(record));
    else
      result.rollout.push_back(std::move(record));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Enclaves and images

std::vector<std::vector<double>> enclave_map(const Tensor& module_rows,
                                             const KernelConfig& cfg, int embedding) {
  if (module_rows.rank() != 2 || module_rows.extent(1) != embedding)
    throw DimensionError("module embedding bank has the wrong shape");
  const int modules = module_rows.extent(0);
  std::vector<std::vector<double>> maps(modules,
                                        std::vector<double>(kFrameSize * kFrameSize));
  for (int r = 0; r < kFrameSize; ++r)
    for (int c = 0; c < kFrameSize; ++c) {
      std::vector<double> x{static_cast<double>(r), static_cast<double>(c)};
      const Tensor emb = embed_position(x, embedding);
      for (int m = 0; m < modules; ++m) {
        std::span<const double> row(module_rows.data().data() +
                                        static_cast<std::size_t>(m) * embedding,
                                    static_cast<std::size_t>(embedding));
        maps[m][r * kFrameSize + c] = kernel(row, emb.data(), cfg);
      }
    }
  return maps;
}

void write_pgm(const std::string& path, const std::vector<double>& image,
               int height, int width) {
  if (static_cast<int>(image.size()) != height * width)
    throw DimensionError("image size does not match its dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write image " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  std::string bytes;
  bytes.reserve(image.size());
  for (double v : image) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    bytes.push_back(static_cast<char>(static_cast<int>(std::lround(clamped * 255.0))));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing image " + path);
}

}  // namespace s2rm
