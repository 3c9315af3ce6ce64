#include "s2rm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include "s2rm/errors.hpp"

namespace s2rm {

// ---------------------------------------------------------------------------
// Optimizer

void AdamState::init(const ParamStore& params) {
  first_moment.clear();
  second_moment.clear();
  step_count = 0;
  for (std::size_t i = 0; i < params.count(); ++i) {
    first_moment.emplace_back(params.tensor(i).size(), 0.0);
    second_moment.emplace_back(params.tensor(i).size(), 0.0);
  }
}

void adam_step(ParamStore& params, AdamState& state, double lr,
               Tensor* module_embeddings) {
  if (!state.initialized()) state.init(params);
  if (state.first_moment.size() != params.count())
    throw DimensionError("optimizer state does not match the parameter store");
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.count(); ++i) {
    Tensor& t = params.tensor(i);
    auto values = t.mutable_data();
    auto grads = t.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != values.size())
      throw DimensionError("optimizer buffer shape mismatch for " + params.name(i));
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      values[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
  if (module_embeddings != nullptr) renormalize_embeddings(*module_embeddings);
  // Canonicalize to the 32-bit storage grid (see checkpoint format).
  for (std::size_t i = 0; i < params.count(); ++i) {
    quantize_f32(params.tensor(i));
    for (auto& x : state.first_moment[i]) x = static_cast<double>(static_cast<float>(x));
    for (auto& x : state.second_moment[i]) x = static_cast<double>(static_cast<float>(x));
  }
}

double clip_gradients(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.count(); ++i)
    for (double g : params.tensor(i).grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (std::size_t i = 0; i < params.count(); ++i)
      for (double& g : params.tensor(i).mutable_grad()) g *= scale;
  }
  return norm;
}

void PlateauScheduler::observe(double val_loss) {
  const double threshold = best_ - min_improve_ * std::abs(best_);
  if (val_loss < threshold) {
    best_ = val_loss;
    stagnant_ = 0;
    return;
  }
  if (++stagnant_ >= patience_) {
    lr_ /= factor_;
    stagnant_ = 0;
  }
}

// ---------------------------------------------------------------------------
// Objective

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("learning rate must be positive");
  if (batch <= 0 || epochs <= 0 || threads <= 0)
    throw ConfigError("batch, epochs and threads must be positive");
  if (!(plateau_factor >= 1.0)) throw ConfigError("plateau factor must be >= 1");
  if (plateau_patience <= 0) throw ConfigError("plateau patience must be positive");
  if (!(clip_norm > 0)) throw ConfigError("clip norm must be positive");
}

Tensor sequence_loss(const ForwardModel& model, const SequenceViews& seq) {
  const std::size_t steps = seq.frames.size();
  if (steps < 2) throw InputError("sequence has no prediction targets");
  S2RMState state = model.initial_state();
  std::vector<Tensor> losses;
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    state = model.step(state, model.wants_future() ? seq.views[t + 1] : seq.views[t]);
    for (const Crop& target : seq.views[t + 1]) {
      Tensor logits = model.query_logits(state, target.row, target.col);
      losses.push_back(bce_with_logits_mean(logits, Tensor::from({kCropArea}, target.values)));
    }
  }
  if (losses.empty()) throw InputError("sequence carries no views to predict");
  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale_shift(total, 1.0 / static_cast<double>(losses.size()), 0.0);
}

namespace {

// Runs fn(i) for i in [0, count) across `threads` workers with a stride
// pattern, so results land in caller-indexed slots independent of scheduling.
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

std::vector<std::vector<double>> snapshot_params(const ParamStore& params) {
  std::vector<std::vector<double>> snap;
  snap.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto d = params.tensor(i).data();
    snap.emplace_back(d.begin(), d.end());
  }
  return snap;
}

void restore_params(ParamStore& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto d = params.tensor(i).mutable_data();
    std::copy(snap[i].begin(), snap[i].end(), d.begin());
  }
}

}  // namespace

double evaluate_loss(const ForwardModel& model, const DatasetReader& data,
                     int threads) {
  const int n = static_cast<int>(data.header().n_seq);
  if (n == 0) throw InputError("empty dataset");
  std::vector<double> losses(n, 0.0);
  strided_parallel(n, threads, [&](int i) {
    losses[i] = sequence_loss(model, data.load(i)).item();
  });
  double total = 0.0;
  for (double v : losses) total += v;
  return total / n;
}

TrainResult train(ForwardModel& model, const DatasetReader& train_data,
                  const DatasetReader& val_data, const TrainConfig& cfg,
                  const std::string& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  ParamStore& params = model.params();
  Tensor* embeddings = nullptr;
  if (auto* s2 = dynamic_cast<S2GruModel*>(&model)) embeddings = &s2->module_embeddings();

  AdamState opt;
  opt.init(params);
  PlateauScheduler scheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_min_improve,
                             cfg.plateau_patience);

  const int n_train = static_cast<int>(train_data.header().n_seq);
  std::vector<int> order(n_train);
  for (int i = 0; i < n_train; ++i) order[i] = i;

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params = snapshot_params(params);
  AdamState best_opt = opt;

  std::ofstream csv(out_dir + "/epochs.csv", std::ios::trunc);
  if (!csv) throw Error("cannot write " + out_dir + "/epochs.csv");
  csv << "epoch,lr,train_loss,val_loss\n";
  csv.flush();
  char line[160];

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Deterministic shuffle per (seed, epoch).
    Rng shuffle_rng(derive_seed(cfg.seed, 0x5481, static_cast<std::uint64_t>(epoch)));
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[i], order[j]);
    }

    double epoch_loss = 0.0;
    int epoch_queries = 0;
    for (int start = 0; start < n_train; start += cfg.batch) {
      const int bsz = std::min(cfg.batch, n_train - start);
      std::vector<GradMap> sinks(bsz);
      std::vector<double> losses(bsz, 0.0);
      strided_parallel(bsz, cfg.threads, [&](int b) {
        const SequenceViews seq = train_data.load(order[start + b]);
        Tape tape;
        Tensor loss = sequence_loss(model, seq);
        losses[b] = loss.item();
        tape.backward(loss, sinks[b]);
      });

      double batch_loss = 0.0;
      for (double v : losses) batch_loss += v;
      batch_loss /= bsz;
      if (!std::isfinite(batch_loss)) {
        std::string seqs;
        for (int b = 0; b < bsz; ++b)
          seqs += (b ? "," : "") + std::to_string(order[start + b]);
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                           ", sequences [" + seqs + "], dataset seed " +
                           std::to_string(train_data.header().master_seed));
      }
      epoch_loss += batch_loss * bsz;
      epoch_queries += bsz;

      // Merge worker gradients in batch-slot order, averaged over the batch.
      params.zero_grad();
      const double inv = 1.0 / bsz;
      for (std::size_t p = 0; p < params.count(); ++p) {
        Tensor& t = params.tensor(p);
        auto grads = t.mutable_grad();
        for (int b = 0; b < bsz; ++b) {
          auto it = sinks[b].find(t.id());
          if (it == sinks[b].end()) continue;
          const auto& src = it->second;
          for (std::size_t j = 0; j < src.size(); ++j) grads[j] += inv * src[j];
        }
      }
      clip_gradients(params, cfg.clip_norm);
      adam_step(params, opt, scheduler.lr(), embeddings);
    }

    const double train_loss = epoch_loss / epoch_queries;
    const double val_loss = evaluate_loss(model, val_data, cfg.threads);
    result.log.push_back({epoch, scheduler.lr(), train_loss, val_loss});
    std::snprintf(line, sizeof(line), "%d,%.9g,%.17g,%.17g\n", epoch, scheduler.lr(),
                  train_loss, val_loss);
    csv << line;
    csv.flush();
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      best_params = snapshot_params(params);
      best_opt = opt;
    }
    scheduler.observe(val_loss);
  }

  restore_params(params, best_params);
  save_checkpoint(out_dir + "/ckpt.bin", params, &best_opt, result.best_epoch,
                  result.best_val_loss);
  if (!csv) throw Error("failed writing " + out_dir + "/epochs.csv");
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[9] = {'S', '2', 'R', 'M', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

void put_f32_block(std::string& buf, const std::vector<double>& values) {
  for (double v : values) put_f32(buf, static_cast<float>(v));
}

struct CkptCursor {
  std::ifstream in;
  std::uint64_t offset = 0;
  explicit CkptCursor(const std::string& path) : in(path, std::ios::binary) {
    if (!in) throw FormatError("cannot open checkpoint " + path, 0);
  }
  void read(void* dst, std::size_t n, const char* what) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw FormatError(std::string("truncated checkpoint while reading ") + what,
                        offset + static_cast<std::uint64_t>(std::max<std::streamsize>(in.gcount(), 0)));
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint8_t b[4];
    read(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  void f32_into(std::span<double> dst, const char* what) {
    for (auto& v : dst) v = static_cast<double>(f32(what));
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const AdamState* optimizer, int epoch, double val_loss) {
  std::string buf;
  buf.append(kCkptMagic, sizeof(kCkptMagic));
  buf.push_back(1);  // version
  put_u32(buf, static_cast<std::uint32_t>(params.count()));
  for (std::size_t i = 0; i < params.count(); ++i) {
    const std::string& name = params.name(i);
    for (std::size_t j = i + 1; j < params.count(); ++j)
      if (params.name(j) == name) throw Error("duplicate checkpoint tensor name: " + name);
    const Tensor& t = params.tensor(i);
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) put_u32(buf, static_cast<std::uint32_t>(t.extent(d)));
    for (double v : t.data()) put_f32(buf, static_cast<float>(v));
  }
  if (optimizer != nullptr && optimizer->initialized()) {
    buf.push_back(1);
    put_u32(buf, static_cast<std::uint32_t>(optimizer->step_count & 0xffffffffull));
    put_u32(buf, static_cast<std::uint32_t>(optimizer->step_count >> 32));
    for (std::size_t i = 0; i < params.count(); ++i) {
      put_f32_block(buf, optimizer->first_moment[i]);
      put_f32_block(buf, optimizer->second_moment[i]);
    }
  } else {
    buf.push_back(0);
  }
  put_u32(buf, static_cast<std::uint32_t>(epoch));
  std::uint64_t loss_bits;
  std::memcpy(&loss_bits, &val_loss, 8);
  put_u32(buf, static_cast<std::uint32_t>(loss_bits & 0xffffffffull));
  put_u32(buf, static_cast<std::uint32_t>(loss_bits >> 32));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("failed writing checkpoint " + path);
}

CheckpointInfo load_checkpoint(const std::string& path, ParamStore& params,
                               AdamState* optimizer) {
  CkptCursor cur(path);
  char magic[9];
  cur.read(magic, 9, "magic");
  if (std::memcmp(magic, kCkptMagic, 9) != 0) throw FormatError("bad checkpoint magic", 0);
  std::uint8_t version;
  cur.read(&version, 1, "version");
  if (version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 9);
  const std::uint32_t count = cur.u32("tensor count");
  if (count != params.count())
    throw Error("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                std::to_string(params.count()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = cur.u32("name length");
    std::string name(name_len, '\0');
    cur.read(name.data(), name_len, "name");
    if (name != params.name(i))
      throw Error("checkpoint tensor '" + name + "' does not match model parameter '" +
                  params.name(i) + "'");
    Tensor& t = params.tensor(i);
    const std::uint32_t rank = cur.u32("rank");
    if (rank != static_cast<std::uint32_t>(t.rank()))
      throw Error("checkpoint rank mismatch for " + name);
    for (std::uint32_t d = 0; d < rank; ++d)
      if (cur.u32("extent") != static_cast<std::uint32_t>(t.extent(static_cast<int>(d))))
        throw Error("checkpoint shape mismatch for " + name);
    cur.f32_into(t.mutable_data(), "values");
  }
  CheckpointInfo info;
  std::uint8_t has_opt;
  cur.read(&has_opt, 1, "optimizer flag");
  info.has_optimizer = has_opt != 0;
  if (info.has_optimizer) {
    const std::uint64_t lo = cur.u32("step count low");
    const std::uint64_t hi = cur.u32("step count high");
    if (optimizer != nullptr) {
      optimizer->init(params);
      optimizer->step_count = (hi << 32) | lo;
      for (std::uint32_t i = 0; i < count; ++i) {
        cur.f32_into(optimizer->first_moment[i], "first moment");
        cur.f32_into(optimizer->second_moment[i], "second moment");
      }
    } else {
      for (std::uint32_t i = 0; i < count; ++i) {
        std::vector<double> skip(params.tensor(i).size());
        cur.f32_into(skip, "moments");
        cur.f32_into(skip, "moments");
      }
    }
  } else if (optimizer != nullptr) {
    optimizer->init(params);
  }
  info.epoch = static_cast<int>(cur.u32("epoch"));
  const std::uint64_t lo = cur.u32("loss low");
  const std::uint64_t hi = cur.u32("loss high");
  const std::uint64_t bits = (hi << 32) | lo;
  std::memcpy(&info.val_loss, &bits, 8);
  return info;
}

}  // namespace s2rm
