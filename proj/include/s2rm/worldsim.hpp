#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "s2rm/codec.hpp"
#include "s2rm/rng.hpp"

// Bouncing-ball world: discrete-time dynamics in a closed 48x48 box, binary
// rendering, view sampling, and the dataset file format.
//
// Coordinates are (row, col) doubles in [0, 48]^2; pixel (r, c) covers the
// unit square with center (r + 0.5, c + 0.5).

namespace s2rm {

inline constexpr int kFrameSize = 48;
inline constexpr int kViewCenterMin = 5;   // crops stay fully inside the frame
inline constexpr int kViewCenterMax = 42;

struct Frame {
  std::array<std::uint8_t, kFrameSize * kFrameSize> px{};  // 0 or 1
  std::uint8_t at(int r, int c) const { return px[static_cast<std::size_t>(r) * kFrameSize + c]; }
  void set(int r, int c, std::uint8_t v) { px[static_cast<std::size_t>(r) * kFrameSize + c] = v; }
  bool operator==(const Frame&) const = default;
};

struct BallState {
  double row = 0, col = 0;
  double vrow = 0, vcol = 0;
  double radius = 3.0;
  bool fixed = false;
  double speed() const;
};

struct SimConfig {
  double box = kFrameSize;
  double radius = 3.0;          // moving balls
  bool central_ball = true;     // stationary ball in the middle
  double central_radius = 4.0;
  double speed_min = 0.5, speed_max = 2.0;  // px per step
  void validate() const;
};

// Moving balls first, the fixed central ball (when enabled) last. Positions
// are rejection-sampled to be disjoint; speeds uniform in [speed_min,
// speed_max] with a uniform direction.
std::vector<BallState> init_balls(int n_moving, const SimConfig& cfg, Rng& rng);

// One integration step: positions advance by velocity, overlapping and
// approaching pairs exchange velocity components along the center line (the
// fixed ball acts as an immovable reflector), walls reflect with overshoot
// mirroring, and a final clamp keeps centers inside [radius, box - radius].
void advance(std::vector<BallState>& balls, const SimConfig& cfg);

// Full trajectory: T states, index 0 being the initial condition.
std::vector<std::vector<BallState>> simulate(int n_moving, int steps,
                                             std::uint64_t seed,
                                             const SimConfig& cfg);

// Pixel (r, c) lights up iff its center lies within some ball's radius.
Frame render(const std::vector<BallState>& balls);

// 11x11 window fully inside the frame, centered at integer (row, col).
Crop crop_at(const Frame& frame, int row, int col);

// `count` crops at centers drawn uniformly from the integer grid
// [kViewCenterMin, kViewCenterMax]^2.
std::vector<Crop> sample_views(const Frame& frame, int count, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset persistence

struct DatasetHeader {
  std::uint32_t version = 1;
  std::uint32_t n_seq = 0, steps = 0, height = kFrameSize, width = kFrameSize;
  std::uint32_t views_per_step = 0, n_balls = 0;
  std::uint64_t master_seed = 0;
};

struct DatasetSpec {
  std::uint32_t n_seq = 500;
  std::uint32_t steps = 30;
  std::uint32_t views_per_step = 10;
  std::uint32_t n_balls = 3;
  std::uint64_t master_seed = 1;
  SimConfig sim;
};

struct SequenceViews {
  std::vector<Frame> frames;            // steps entries
  std::vector<std::vector<Crop>> views; // steps x views_per_step
};

// Sequence i of a dataset, reproducible from the derived seed alone.
SequenceViews make_sequence(const DatasetSpec& spec, std::uint64_t seq_seed);

// Writes the file: magic, little-endian header, then per sequence the
// bit-packed frames (LSB-first within each byte, row-major) followed by the
// u16 (row, col) view centers. Crops are re-extracted on load, not stored.
void generate_dataset(const DatasetSpec& spec, const std::string& path);

class DatasetReader {
 public:
  explicit DatasetReader(std::string path);
  const DatasetHeader& header() const { return header_; }
  const std::string& path() const { return path_; }
  // Reads one sequence. Stateless w.r.t. the reader, so concurrent calls
  // from different threads are safe.
  SequenceViews load(std::uint32_t index) const;

 private:
  std::string path_;
  DatasetHeader header_;
  std::uint64_t payload_offset_ = 0;
  std::uint64_t block_bytes_ = 0;
};

}  // namespace s2rm
