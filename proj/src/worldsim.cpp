#include "s2rm/worldsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "s2rm/errors.hpp"

namespace s2rm {

namespace {

constexpr char kMagic[8] = {'S', '2', 'R', 'M', 'B', 'B', '1', '\n'};
constexpr int kFrameBytes = kFrameSize * kFrameSize / 8;  // 288

double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

double BallState::speed() const { return std::hypot(vrow, vcol); }

void SimConfig::validate() const {
  if (!(box > 0)) throw ConfigError("box size must be positive");
  if (!(radius > 0) || 2 * radius >= box)
    throw ConfigError("ball radius does not fit the box");
  if (central_ball && (!(central_radius > 0) || 2 * central_radius >= box))
    throw ConfigError("central ball radius does not fit the box");
  if (!(speed_min > 0) || speed_max < speed_min)
    throw ConfigError("speed range is invalid");
}

std::vector<BallState> init_balls(int n_moving, const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  if (n_moving < 1) throw ConfigError("need at least one moving ball");
  std::vector<BallState> balls;
  const double two_pi = 6.283185307179586476925286766559;
  for (int i = 0; i < n_moving; ++i) {
    BallState b;
    b.radius = cfg.radius;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000)
        throw ConfigError("could not place balls without overlap; box too crowded");
      b.row = rng.uniform(cfg.radius, cfg.box - cfg.radius);
      b.col = rng.uniform(cfg.radius, cfg.box - cfg.radius);
      bool clear = true;
      for (const BallState& other : balls) {
        const double d = std::hypot(b.row - other.row, b.col - other.col);
        if (d < b.radius + other.radius + 0.5) clear = false;
      }
      if (cfg.central_ball) {
        const double d = std::hypot(b.row - cfg.box / 2, b.col - cfg.box / 2);
        if (d < b.radius + cfg.central_radius + 0.5) clear = false;
      }
      if (clear) break;
    }
    const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
    const double angle = rng.uniform(0.0, two_pi);
    b.vrow = speed * std::cos(angle);
    b.vcol = speed * std::sin(angle);
    balls.push_back(b);
  }
  if (cfg.central_ball) {
    BallState c;
    c.row = cfg.box / 2;
    c.col = cfg.box / 2;
    c.radius = cfg.central_radius;
    c.fixed = true;
    balls.push_back(c);
  }
  return balls;
}

void advance(std::vector<BallState>& balls, const SimConfig& cfg) {
  for (BallState& b : balls) {
    if (b.fixed) continue;
    b.row += b.vrow;
    b.col += b.vcol;
  }
  // Pairwise elastic collisions in fixed index order.
  for (std::size_t i = 0; i < balls.size(); ++i)
    for (std::size_t j = i + 1; j < balls.size(); ++j) {
      BallState& a = balls[i];
      BallState& b = balls[j];
      if (a.fixed && b.fixed) continue;
      double drow = b.row - a.row, dcol = b.col - a.col;
      double dist = std::hypot(drow, dcol);
      const double rsum = a.radius + b.radius;
      if (dist >= rsum) continue;
      if (dist < 1e-12) {
        drow = 1.0;
        dcol = 0.0;
        dist = 1.0;
      }
      const double nrow = drow / dist, ncol = dcol / dist;
      const double va_n = a.vrow * nrow + a.vcol * ncol;
      const double vb_n = b.vrow * nrow + b.vcol * ncol;
      if (vb_n - va_n >= 0) continue;  // separating already
      const double overlap = rsum - dist;
      if (a.fixed || b.fixed) {
        // Immovable partner: the moving ball's normal component reflects,
        // preserving its speed, and it takes the full separation.
        BallState& mv = a.fixed ? b : a;
        const double sign = a.fixed ? 1.0 : -1.0;  // push away from the fixed one
        const double v_n = mv.vrow * nrow + mv.vcol * ncol;
        mv.vrow -= 2.0 * v_n * nrow;
        mv.vcol -= 2.0 * v_n * ncol;
        mv.row += sign * overlap * nrow;
        mv.col += sign * overlap * ncol;
      } else {
        // Equal masses: swap the normal components.
        const double delta = vb_n - va_n;
        a.vrow += delta * nrow;
        a.vcol += delta * ncol;
        b.vrow -= delta * nrow;
        b.vcol -= delta * ncol;
        a.row -= 0.5 * overlap * nrow;
        a.col -= 0.5 * overlap * ncol;
        b.row += 0.5 * overlap * nrow;
        b.col += 0.5 * overlap * ncol;
      }
    }
  // Wall reflection with overshoot mirroring, then a containment clamp.
  for (BallState& b : balls) {
    if (b.fixed) continue;
    const double lo = b.radius, hi = cfg.box - b.radius;
    if (b.row < lo) {
      b.row = 2 * lo - b.row;
      b.vrow = -b.vrow;
    } else if (b.row > hi) {
      b.row = 2 * hi - b.row;
      b.vrow = -b.vrow;
    }
    if (b.col < lo) {
      b.col = 2 * lo - b.col;
      b.vcol = -b.vcol;
    } else if (b.col > hi) {
      b.col = 2 * hi - b.col;
      b.vcol = -b.vcol;
    }
    b.row = clamp(b.row, lo, hi);
    b.col = clamp(b.col, lo, hi);
  }
}

std::vector<std::vector<BallState>> simulate(int n_moving, int steps,
                                             std::uint64_t seed,
                                             const SimConfig& cfg) {
  if (steps < 1) throw ConfigError("need at least one step");
  Rng rng(seed);
  std::vector<BallState> balls = init_balls(n_moving, cfg, rng);
  std::vector<std::vector<BallState>> trajectory;
  trajectory.reserve(steps);
  trajectory.push_back(balls);
  for (int t = 1; t < steps; ++t) {
    advance(balls, cfg);
    trajectory.push_back(balls);
  }
  return trajectory;
}

Frame render(const std::vector<BallState>& balls) {
  Frame f;
  for (const BallState& b : balls) {
    const double r2 = b.radius * b.radius;
    const int rlo = std::max(0, static_cast<int>(std::floor(b.row - b.radius - 1)));
    const int rhi = std::min(kFrameSize - 1, static_cast<int>(std::ceil(b.row + b.radius)));
    const int clo = std::max(0, static_cast<int>(std::floor(b.col - b.radius - 1)));
    const int chi = std::min(kFrameSize - 1, static_cast<int>(std::ceil(b.col + b.radius)));
    for (int r = rlo; r <= rhi; ++r)
      for (int c = clo; c <= chi; ++c) {
        const double dr = (r + 0.5) - b.row;
        const double dc = (c + 0.5) - b.col;
        if (dr * dr + dc * dc <= r2) f.set(r, c, 1);
      }
  }
  return f;
}

Crop crop_at(const Frame& frame, int row, int col) {
  if (row < kViewCenterMin || row > kViewCenterMax || col < kViewCenterMin ||
      col > kViewCenterMax)
    throw InputError("crop center (" + std::to_string(row) + ", " + std::to_string(col) +
                     ") leaves the 11x11 window outside the frame");
  Crop c;
  c.row = row;
  c.col = col;
  c.values.resize(kCropArea);
  const int half = kCropSize / 2;
  for (int r = 0; r < kCropSize; ++r)
    for (int cc = 0; cc < kCropSize; ++cc)
      c.values[r * kCropSize + cc] =
          static_cast<double>(frame.at(row - half + r, col - half + cc));
  return c;
}

std::vector<Crop> sample_views(const Frame& frame, int count, Rng& rng) {
  if (count < 0) throw ConfigError("negative view count");
  std::vector<Crop> views;
  views.reserve(count);
  const int span = kViewCenterMax - kViewCenterMin + 1;
  for (int i = 0; i < count; ++i) {
    const int r = kViewCenterMin + static_cast<int>(rng.uniform_int(span));
    const int c = kViewCenterMin + static_cast<int>(rng.uniform_int(span));
    views.push_back(crop_at(frame, r, c));
  }
  return views;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

void pack_frame(const Frame& f, std::uint8_t* out) {
  std::memset(out, 0, kFrameBytes);
  for (int i = 0; i < kFrameSize * kFrameSize; ++i)
    if (f.px[i]) out[i >> 3] |= static_cast<std::uint8_t>(1u << (i & 7));
}

Frame unpack_frame(const std::uint8_t* in) {
  Frame f;
  for (int i = 0; i < kFrameSize * kFrameSize; ++i)
    f.px[i] = (in[i >> 3] >> (i & 7)) & 1u;
  return f;
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& buf, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct FileCursor {
  std::ifstream in;
  std::uint64_t offset = 0;
  explicit FileCursor(const std::string& path) : in(path, std::ios::binary) {
    if (!in) throw FormatError("cannot open dataset file " + path, 0);
  }
  void read(void* dst, std::size_t n, const char* what) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw FormatError(std::string("truncated dataset file while reading ") + what,
                        offset + static_cast<std::uint64_t>(std::max<std::streamsize>(in.gcount(), 0)));
    offset += n;
  }
  void seek(std::uint64_t pos) {
    in.clear();
    in.seekg(static_cast<std::streamoff>(pos));
    if (!in) throw FormatError("seek past end of dataset file", pos);
    offset = pos;
  }
  std::uint32_t u32(const char* what) {
    std::uint8_t b[4];
    read(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::uint16_t u16(const char* what) {
    std::uint8_t b[2];
    read(b, 2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
};

constexpr std::uint64_t kHeaderBytes = 8 + 7 * 4 + 8;

}  // namespace

SequenceViews make_sequence(const DatasetSpec& spec, std::uint64_t seq_seed) {
  SimConfig sim = spec.sim;
  sim.validate();
  Rng rng(seq_seed);
  std::vector<BallState> balls = init_balls(static_cast<int>(spec.n_balls), sim, rng);
  SequenceViews seq;
  seq.frames.reserve(spec.steps);
  seq.views.reserve(spec.steps);
  for (std::uint32_t t = 0; t < spec.steps; ++t) {
    if (t > 0) advance(balls, sim);
    seq.frames.push_back(render(balls));
    seq.views.push_back(sample_views(seq.frames.back(),
                                     static_cast<int>(spec.views_per_step), rng));
  }
  return seq;
}

void generate_dataset(const DatasetSpec& spec, const std::string& path) {
  if (spec.n_seq == 0 || spec.steps == 0) throw ConfigError("empty dataset spec");
  spec.sim.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write dataset file " + path);
  std::string header;
  header.append(kMagic, sizeof(kMagic));
  put_u32(header, 1);  // version
  put_u32(header, spec.n_seq);
  put_u32(header, spec.steps);
  put_u32(header, kFrameSize);
  put_u32(header, kFrameSize);
  put_u32(header, spec.views_per_step);
  put_u32(header, spec.n_balls);
  put_u32(header, static_cast<std::uint32_t>(spec.master_seed & 0xffffffffull));
  put_u32(header, static_cast<std::uint32_t>(spec.master_seed >> 32));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  std::vector<std::uint8_t> packed(kFrameBytes);
  for (std::uint32_t i = 0; i < spec.n_seq; ++i) {
    SequenceViews seq = make_sequence(spec, derive_seed(spec.master_seed, i));
    std::string block;
    block.reserve(spec.steps * (kFrameBytes + spec.views_per_step * 4));
    for (const Frame& f : seq.frames) {
      pack_frame(f, packed.data());
      block.append(reinterpret_cast<const char*>(packed.data()), kFrameBytes);
    }
    for (const auto& step_views : seq.views)
      for (const Crop& v : step_views) {
        put_u16(block, static_cast<std::uint16_t>(v.row));
        put_u16(block, static_cast<std::uint16_t>(v.col));
      }
    out.write(block.data(), static_cast<std::streamsize>(block.size()));
  }
  if (!out) throw Error("failed writing dataset file " + path);
}

DatasetReader::DatasetReader(std::string path) : path_(std::move(path)) {
  FileCursor cur(path_);
  char magic[8];
  cur.read(magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("bad dataset magic", 0);
  header_.version = cur.u32("version");
  if (header_.version != 1)
    throw FormatError("unsupported dataset version " + std::to_string(header_.version), 8);
  header_.n_seq = cur.u32("sequence count");
  header_.steps = cur.u32("step count");
  header_.height = cur.u32("height");
  header_.width = cur.u32("width");
  header_.views_per_step = cur.u32("view count");
  header_.n_balls = cur.u32("ball count");
  const std::uint32_t lo = cur.u32("seed low");
  const std::uint32_t hi = cur.u32("seed high");
  header_.master_seed = (static_cast<std::uint64_t>(hi) << 32) | lo;
  if (header_.height != kFrameSize || header_.width != kFrameSize)
    throw FormatError("unsupported frame size", 20);
  payload_offset_ = kHeaderBytes;
  block_bytes_ = static_cast<std::uint64_t>(header_.steps) *
                 (kFrameBytes + static_cast<std::uint64_t>(header_.views_per_step) * 4);
  // Validate the total length up front so truncation is reported on open.
  cur.seek(0);
  cur.in.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(cur.in.tellg());
  const std::uint64_t want = payload_offset_ + block_bytes_ * header_.n_seq;
  if (size < want)
    throw FormatError("dataset file shorter than the header promises", size);
}

SequenceViews DatasetReader::load(std::uint32_t index) const {
  if (index >= header_.n_seq)
    throw InputError("sequence index " + std::to_string(index) + " out of range");
  FileCursor cur(path_);
  cur.seek(payload_offset_ + block_bytes_ * index);
  SequenceViews seq;
  seq.frames.reserve(header_.steps);
  seq.views.resize(header_.steps);
  std::vector<std::uint8_t> packed(kFrameBytes);
  for (std::uint32_t t = 0; t < header_.steps; ++t) {
    cur.read(packed.data(), kFrameBytes, "frame");
    seq.frames.push_back(unpack_frame(packed.data()));
  }
  for (std::uint32_t t = 0; t < header_.steps; ++t) {
    seq.views[t].reserve(header_.views_per_step);
    for (std::uint32_t a = 0; a < header_.views_per_step; ++a) {
      const int r = cur.u16("view row");
      const int c = cur.u16("view col");
      seq.views[t].push_back(crop_at(seq.frames[t], r, c));
    }
  }
  return seq;
}

}  // namespace s2rm
