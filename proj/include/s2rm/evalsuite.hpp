#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "s2rm/recurrent.hpp"
#include "s2rm/worldsim.hpp"

// Evaluation protocols: pixel-level metrics over one-step prediction,
// dropped-view robustness sweeps, closed-loop rollouts with grid stitching,
// and the module enclave maps.

namespace s2rm {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  void add(bool predicted, bool target);
  void merge(const ConfusionCounts& other);
  std::uint64_t total() const { return tp + fp + tn + fn; }
};

// Arithmetic mean of recall and specificity. If a target class is absent the
// defined term is reported alone and *partial is set.
double balanced_accuracy(const ConfusionCounts& c, bool* partial = nullptr);

// Harmonic mean of precision and recall; 0 when precision + recall is 0.
double f1_score(const ConfusionCounts& c);

struct MetricsRow {
  std::string dataset;
  int n_balls = 0;
  double drop_fraction = 0.0;
  double balanced_accuracy = 0.0;
  double f1 = 0.0;
  double mean_bce = 0.0;
  bool partial = false;  // a class was absent in the targets
};

struct EvalOptions {
  double drop_fraction = 0.0;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string label;  // dataset name in the report; defaults to the file path
};

// Teacher-forced one-step protocol: at each step feed
// ceil((1 - drop_fraction) * A) views chosen by seeded subsampling, query all
// A view centers of the next step, and pool pixel confusion counts over the
// dataset. Predictions threshold the sigmoid at 0.5.
MetricsRow one_step_eval(const ForwardModel& model, const DatasetReader& data,
                         const EvalOptions& opt);

// Input-free reference predictors evaluated under the same protocol. The
// copy-previous reference answers a query at t+1 with the ground-truth frame
// content of step t at the same window.
enum class ReferenceKind { kConstantZero, kCopyPrevious };
MetricsRow reference_one_step_eval(ReferenceKind kind, const DatasetReader& data,
                                   const EvalOptions& opt);

// Grid over datasets x drop fractions; one row per cell.
std::vector<MetricsRow> robustness_sweep(const ForwardModel& model,
                                         const std::vector<const DatasetReader*>& datasets,
                                         const std::vector<double>& fractions,
                                         std::uint64_t seed, int threads);

// Header: dataset,n_balls,drop_fraction,balanced_accuracy,f1,mean_bce.
// Partial rows are flagged on stderr, not in the file.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// ---------------------------------------------------------------------------
// Rollouts

// Probability-space interface driven by the rollout protocol; real models and
// the ground-truth stub both implement it.
class RolloutModel {
 public:
  virtual ~RolloutModel() = default;
  virtual void reset() = 0;
  virtual void feed(const std::vector<Crop>& obs) = 0;
  // Probabilities in [0, 1] for the crop at (row, col), read-only.
  virtual std::vector<double> predict_probs(int row, int col) const = 0;
};

class ForwardRollout : public RolloutModel {
 public:
  explicit ForwardRollout(const ForwardModel& model);
  void reset() override;
  void feed(const std::vector<Crop>& obs) override;
  std::vector<double> predict_probs(int row, int col) const override;

 private:
  const ForwardModel& model_;
  S2RMState state_;
};

// Answers every query with the ground-truth crop of the frame about to be
// predicted; used to validate the protocol itself.
class OracleRollout : public RolloutModel {
 public:
  explicit OracleRollout(const SequenceViews& episode);
  void reset() override;
  void feed(const std::vector<Crop>& obs) override;
  std::vector<double> predict_probs(int row, int col) const override;

 private:
  const SequenceViews& episode_;
  std::size_t fed_ = 0;
};

struct RolloutConfig {
  int prompt_steps = 20;
  int rollout_steps = 25;
  int views = 10;
  std::uint64_t seed = 0;
};

struct RolloutRecord {
  int step = 0;                                    // 1-based protocol step
  std::vector<double> stitched;                    // 48*48 probabilities
  std::vector<std::pair<int, int>> view_centers;   // centers fed at this step
};

struct RolloutResult {
  std::vector<RolloutRecord> prompt;   // prompt_steps records
  std::vector<RolloutRecord> rollout;  // rollout_steps records
};

// Protocol: at step t the model is queried on the 4x4 stitching grid for its
// prediction of frame t, then fed observations for frame t — ground truth at
// fresh random centers during the prompt phase, its own 0.5-thresholded
// predictions at fresh random centers afterwards. The center stream depends
// only on the seed, so different models see identical queries.
RolloutResult rollout(RolloutModel& model, const SequenceViews& episode,
                      const RolloutConfig& cfg);

// 16 crops at grid centers {6,18,30,42}^2 pasted into a 48x48 image;
// unpainted pixels are 0. The windows are disjoint with 1-px seams.
std::vector<double> stitch_grid(const std::vector<std::vector<double>>& crops);
std::vector<std::pair<int, int>> stitch_grid_centers();

// ---------------------------------------------------------------------------
// Enclaves and images

// Image m holds Z(P(x), p_m) over the integer pixel grid.
std::vector<std::vector<double>> enclave_map(const Tensor& module_rows,
                                             const KernelConfig& cfg,
                                             int embedding);

// 8-bit binary PGM (P5), values scaled from [0, 1].
void write_pgm(const std::string& path, const std::vector<double>& image,
               int height = kFrameSize, int width = kFrameSize);

}  // namespace s2rm
