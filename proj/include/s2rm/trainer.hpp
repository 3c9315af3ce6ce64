#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "s2rm/recurrent.hpp"
#include "s2rm/worldsim.hpp"

// Optimization: Adam with gradient clipping, plateau learning-rate decay,
// the teacher-forced training loop, and checkpoint persistence.

namespace s2rm {

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first_moment, second_moment;
  void init(const ParamStore& params);
  bool initialized() const { return !first_moment.empty(); }
};

// Bias-corrected Adam update from the accumulated .grad() buffers. The
// module-embedding bank (when given) is reprojected onto the sphere, and all
// parameters and moments are then rounded to 32-bit storage precision so a
// checkpoint written afterwards restores them bit-exactly.
void adam_step(ParamStore& params, AdamState& state, double lr,
               Tensor* module_embeddings = nullptr);

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(ParamStore& params, double max_norm);

class PlateauScheduler {
 public:
  PlateauScheduler(double lr0, double factor, double min_improve, int patience)
      : lr_(lr0), factor_(factor), min_improve_(min_improve), patience_(patience) {}

  // Once per epoch. The rate halves (divides by `factor`) after `patience`
  // consecutive epochs whose relative improvement over the best seen loss
  // stays below `min_improve`.
  void observe(double val_loss);
  double lr() const { return lr_; }

 private:
  double lr_, factor_, min_improve_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int stagnant_ = 0;
};

struct TrainConfig {
  double lr0 = 3e-4;
  int batch = 8;
  int epochs = 40;
  double plateau_factor = 2.0;
  double plateau_min_improve = 1e-4;  // 0.01% relative
  int plateau_patience = 5;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  int threads = 1;
  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0, train_loss = 0, val_loss = 0;
};

struct TrainResult {
  int best_epoch = 0;
  double best_val_loss = 0;
  std::vector<EpochLog> log;
};

// Differentiable teacher-forced objective for one sequence: feed the stored
// views of step t, query the view centers of t+1, mean BCE against the t+1
// crops over all pixels, queries and steps. Oracle models are instead fed the
// views of the step being predicted.
Tensor sequence_loss(const ForwardModel& model, const SequenceViews& seq);

// Mean sequence loss over a dataset without recording gradients.
double evaluate_loss(const ForwardModel& model, const DatasetReader& data,
                     int threads);

// Full loop: shuffled mini-batches, Adam with clipping, plateau decay,
// per-epoch validation, lowest-validation-loss selection. Writes
// out_dir/ckpt.bin (selected checkpoint) and out_dir/epochs.csv. Identical
// results for any thread count; aborts with NumericError on non-finite loss.
TrainResult train(ForwardModel& model, const DatasetReader& train_data,
                  const DatasetReader& val_data, const TrainConfig& cfg,
                  const std::string& out_dir);

// ---------------------------------------------------------------------------
// Checkpoints: magic, per-tensor records (name, rank, dims, 32-bit
// little-endian values), optional optimizer state, epoch, validation loss.

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const AdamState* optimizer, int epoch, double val_loss);

struct CheckpointInfo {
  int epoch = 0;
  double val_loss = 0;
  bool has_optimizer = false;
};

// Restores values into an existing, identically structured ParamStore.
CheckpointInfo load_checkpoint(const std::string& path, ParamStore& params,
                               AdamState* optimizer);

}  // namespace s2rm
