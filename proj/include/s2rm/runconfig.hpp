#pragma once

#include <string>
#include <vector>

#include "s2rm/recurrent.hpp"
#include "s2rm/trainer.hpp"

// Structured run configuration: INI-style sections of key = value pairs with
// strict key checking, plus the provenance echo written next to outputs.

namespace s2rm {

struct GenDataParams {
  std::uint32_t train_seqs = 500;
  std::uint32_t val_seqs = 50;
  std::uint32_t ood_seqs = 50;
  std::uint32_t frames = 30;
  std::uint32_t views = 10;
  std::uint32_t balls = 3;
  std::uint64_t seed = 7;
};

struct EvalParams {
  double drop = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> fractions = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::uint32_t rollout_index = 0;
  std::uint64_t rollout_seed = 0;
};

struct RunConfig {
  // [model]
  std::string kind = "s2gru";
  std::uint64_t model_seed = 1;
  S2RMConfig s2rm;
  BaselineConfig baseline;
  // [train]
  TrainConfig train;
  // [data]
  GenDataParams gen;
  std::string train_path;
  std::string val_path;
  std::vector<std::string> eval_paths;
  std::string checkpoint;
  // [eval]
  EvalParams eval;
  // [run]
  std::string out_dir = "out";
  int threads = 1;

  void validate() const;
};

// Parses config text; unknown sections or keys are rejected with the
// offending name in the message.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);

// Applies "section.key=value" overrides in order.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Full round-trippable rendering of the effective configuration.
std::string render_config(const RunConfig& cfg);

}  // namespace s2rm
