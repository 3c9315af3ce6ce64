#include "s2rm/geometry.hpp"

#include <cmath>

#include "s2rm/errors.hpp"
#include "s2rm/rng.hpp"

namespace s2rm {

void KernelConfig::validate() const {
  // Zero bandwidth makes the kernel identically one (with truncation -1),
  // which is the documented way to disable spatial structure.
  if (!(bandwidth >= 0.0))
    throw ConfigError("kernel bandwidth must be non-negative");
  if (!(truncation >= -1.0 && truncation < 1.0))
    throw ConfigError("kernel truncation must lie in [-1, 1)");
}

std::vector<double> sinusoid_features(std::span<const double> x, int d) {
  const int n = static_cast<int>(x.size());
  if (n <= 0) throw ConfigError("positional embedding needs at least one coordinate");
  if (d <= 0 || d % (2 * n) != 0)
    throw ConfigError("embedding size " + std::to_string(d) +
                      " is not a positive multiple of 2 * " + std::to_string(n));
  const int n_freq = d / (2 * n);
  std::vector<double> out(static_cast<std::size_t>(d));
  for (int m = 0; m < n; ++m)
    for (int i = 0; i < n_freq; ++i) {
      const double scale = std::pow(10000.0, static_cast<double>(i) / n_freq);
      const double arg = x[m] / scale;
      out[2 * (m * n_freq + i)] = std::sin(arg);
      out[2 * (m * n_freq + i) + 1] = std::cos(arg);
    }
  return out;
}

Tensor embed_position(std::span<const double> x, int d) {
  std::vector<double> v = sinusoid_features(x, d);
  double ss = 0.0;
  for (double e : v) ss += e * e;
  const double norm = std::sqrt(ss);
  // The cosine slots guarantee norm >= 1 per input dimension, so this cannot
  // legitimately be zero.
  for (double& e : v) e /= norm;
  return Tensor::from({d}, std::move(v));
}

Tensor embed_positions(const std::vector<std::vector<double>>& points, int d) {
  if (points.empty()) return Tensor::zeros({1, d});  // callers guard A == 0
  std::vector<double> data;
  data.reserve(points.size() * static_cast<std::size_t>(d));
  for (const auto& p : points) {
    Tensor e = embed_position(p, d);
    data.insert(data.end(), e.data().begin(), e.data().end());
  }
  return Tensor::from({static_cast<int>(points.size()), d}, std::move(data));
}

double kernel(std::span<const double> p, std::span<const double> s,
              const KernelConfig& cfg) {
  if (p.size() != s.size()) throw DimensionError("kernel operands differ in size");
  double dot = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * s[i];
  if (dot < cfg.truncation) return 0.0;
  return std::exp(-2.0 * cfg.bandwidth * (1.0 - dot));
}

Tensor kernel_gate(const Tensor& dots, const KernelConfig& cfg) {
  cfg.validate();
  const double eps = cfg.bandwidth, tau = cfg.truncation;
  return unary_custom(
      dots,
      [eps, tau](double v) { return v >= tau ? std::exp(-2.0 * eps * (1.0 - v)) : 0.0; },
      [eps](double v) { return 2.0 * eps * std::exp(-2.0 * eps * (1.0 - v)); });
}

Tensor kernel_batch(const Tensor& p_rows, const Tensor& s_rows,
                    const KernelConfig& cfg) {
  return kernel_gate(contract("md,ad->ma", p_rows, s_rows), cfg);
}

Tensor make_module_embeddings(int modules, int d, std::uint64_t seed,
                              ParamStore& store, const std::string& name) {
  if (modules <= 0 || d <= 0)
    throw ConfigError("module embeddings need positive module count and dimension");
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(modules) * d);
  for (double& v : data) v = rng.normal();
  Tensor rows = Tensor::param({modules, d}, std::move(data));
  renormalize_embeddings(rows);
  quantize_f32(rows);
  return store.add(name, std::move(rows));
}

void renormalize_embeddings(Tensor& rows) {
  if (rows.rank() != 2) throw DimensionError("embedding bank must be rank 2");
  const int m = rows.extent(0), d = rows.extent(1);
  auto data = rows.mutable_data();
  for (int r = 0; r < m; ++r) {
    double ss = 0.0;
    for (int j = 0; j < d; ++j) {
      const double v = data[static_cast<std::size_t>(r) * d + j];
      ss += v * v;
    }
    const double norm = std::sqrt(ss);
    if (!(norm > 1e-150))
      throw DegenerateInputError("module embedding row " + std::to_string(r) +
                                 " is (near-)zero");
    for (int j = 0; j < d; ++j) data[static_cast<std::size_t>(r) * d + j] /= norm;
  }
}

}  // namespace s2rm
