#include "s2rm/gradsuite.hpp"

#include <cmath>

#include "s2rm/geometry.hpp"
#include "s2rm/recurrent.hpp"
#include "s2rm/rng.hpp"
#include "s2rm/tensor.hpp"

namespace s2rm {

namespace {

constexpr double kStep = 1e-5;
constexpr double kPrimitiveTol = 1e-6;
constexpr double kCompositionTol = 1e-4;

Tensor random_param(Shape shape, std::uint64_t seed, double scale = 0.7) {
  Rng rng(seed);
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::param(std::move(shape), std::move(v));
}

void check(GradSuiteReport& report, const std::string& name, double error,
           double tolerance, bool composition = false) {
  report.entries.push_back({name, error, tolerance, error < tolerance});
  if (composition)
    report.worst_composition = std::max(report.worst_composition, error);
  else
    report.worst_primitive = std::max(report.worst_primitive, error);
}

}  // namespace

GradSuiteReport run_gradient_suite() {
  GradSuiteReport report;

  {
    Tensor a = random_param({3, 4}, 1);
    Tensor b = random_param({4, 2}, 2);
    auto fa = [&](Tensor& t) { return reduce_sum_all(contract("ij,jk->ik", t, b)); };
    check(report, "contract/lhs", grad_check(fa, a, kStep), kPrimitiveTol);
    auto fb = [&](Tensor& t) { return reduce_sum_all(contract("ij,jk->ik", a, t)); };
    check(report, "contract/rhs", grad_check(fb, b, kStep), kPrimitiveTol);
    Tensor c = random_param({2, 3, 2}, 3);
    Tensor d = random_param({3, 2, 2}, 4);
    auto fc = [&](Tensor& t) { return reduce_sum_all(contract("mak,akv->mkv", t, d)); };
    check(report, "contract/summed-label", grad_check(fc, c, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({3, 4}, 5);
    Tensor r = random_param({4}, 6);
    auto f_add = [&](Tensor& t) { return reduce_sum_all(mul(add(t, r), add(t, r))); };
    check(report, "add/broadcast", grad_check(f_add, a, kStep), kPrimitiveTol);
    auto f_sub = [&](Tensor& t) { return reduce_sum_all(mul(sub(a, t), sub(a, t))); };
    check(report, "sub/broadcast", grad_check(f_sub, r, kStep), kPrimitiveTol);
    auto f_mul = [&](Tensor& t) { return reduce_sum_all(mul(a, t)); };
    check(report, "mul/broadcast", grad_check(f_mul, r, kStep), kPrimitiveTol);
    auto f_scale = [&](Tensor& t) { return reduce_sum_all(scale_shift(t, -1.75, 0.5)); };
    check(report, "scale_shift", grad_check(f_scale, a, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({6}, 7, 0.5);
    auto f_exp = [&](Tensor& t) { return reduce_sum_all(exp(t)); };
    check(report, "exp", grad_check(f_exp, a, kStep), kPrimitiveTol);
    auto f_tanh = [&](Tensor& t) { return reduce_sum_all(mul(tanh(t), tanh(t))); };
    check(report, "tanh", grad_check(f_tanh, a, kStep), kPrimitiveTol);
    auto f_sig = [&](Tensor& t) { return reduce_sum_all(sigmoid(t)); };
    check(report, "sigmoid", grad_check(f_sig, a, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({2, 5}, 8);
    auto f = [&](Tensor& t) {
      Tensor y = softmax(t, 1);
      return reduce_sum_all(mul(y, y));
    };
    check(report, "softmax", grad_check(f, a, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({3, 2}, 9);
    auto f = [&](Tensor& t) {
      Tensor s = reduce_sum(t, 0);
      return reduce_sum_all(mul(s, s));
    };
    check(report, "reduce_sum", grad_check(f, a, kStep), kPrimitiveTol);
    auto f_all = [&](Tensor& t) { return reduce_sum_all(mul(t, t)); };
    check(report, "reduce_sum_all", grad_check(f_all, a, kStep), kPrimitiveTol);
    auto f_ord = [&](Tensor& t) {
      Tensor s = reduce_sum_rows_ordered(t);
      return reduce_sum_all(mul(s, s));
    };
    check(report, "reduce_sum_rows_ordered", grad_check(f_ord, a, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({2, 3}, 10);
    Tensor b = random_param({1, 3}, 11);
    auto f = [&](Tensor& t) {
      Tensor c = concat({t, b}, 0);
      return reduce_sum_all(mul(c, c));
    };
    check(report, "concat", grad_check(f, a, kStep), kPrimitiveTol);
  }
  {
    Tensor x = random_param({3, 4}, 12);
    Tensor w = random_param({4, 2}, 13);
    Tensor b = random_param({2}, 14);
    auto fx = [&](Tensor& t) { return reduce_sum_all(tanh(affine(t, w, b))); };
    check(report, "affine/input", grad_check(fx, x, kStep), kPrimitiveTol);
    auto fw = [&](Tensor& t) { return reduce_sum_all(tanh(affine(x, t, b))); };
    check(report, "affine/weight", grad_check(fw, w, kStep), kPrimitiveTol);
    auto fb = [&](Tensor& t) { return reduce_sum_all(tanh(affine(x, w, t))); };
    check(report, "affine/bias", grad_check(fb, b, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({2, 6}, 15);
    Tensor probe = random_param({2, 6}, 16);
    auto f = [&](Tensor& t) { return reduce_sum_all(mul(l2_normalize(t, 1), probe)); };
    check(report, "l2_normalize", grad_check(f, a, kStep), kPrimitiveTol);
  }
  {
    Tensor a = random_param({2, 3}, 17);
    auto f = [&](Tensor& t) {
      Tensor s = stack_rows({row(t, 1), row(t, 0)});
      Tensor r = reshape(s, {6});
      return reduce_sum_all(mul(r, r));
    };
    check(report, "reshape/row/stack_rows", grad_check(f, a, kStep), kPrimitiveTol);
  }
  {
    Tensor l = random_param({8}, 18);
    Tensor targets = Tensor::from({8}, {1, 0, 1, 1, 0, 0, 1, 0});
    auto f = [&](Tensor& t) { return bce_with_logits_mean(t, targets); };
    check(report, "bce_with_logits_mean", grad_check(f, l, kStep), kPrimitiveTol);
  }
  {
    // Kernel gate in its differentiable (untruncated) region.
    KernelConfig cfg{1.3, -1.0};
    Tensor dots = random_param({6}, 19, 0.4);
    auto f = [&](Tensor& t) { return reduce_sum_all(kernel_gate(t, cfg)); };
    check(report, "kernel_gate/untruncated", grad_check(f, dots, kStep), kPrimitiveTol);
  }
  {
    ParamStore store;
    Rng rng(20);
    GruParams p = make_gru("g", 3, 4, rng, store);
    Tensor u = random_param({3}, 21);
    Tensor h = random_param({4}, 22);
    auto f = [&](Tensor&) {
      Tensor n = gru_step(u, h, p);
      return reduce_sum_all(mul(n, n));
    };
    check(report, "gru_step/input", grad_check(f, u, kStep), 1e-5);
    check(report, "gru_step/state", grad_check(f, h, kStep), 1e-5);
    check(report, "gru_step/params", grad_check(f, store.at("g.w_cand"), kStep), 1e-5);
  }

  // Full composition: one model step over observations, a query, and the
  // training loss, differentiated through every parameter. Kernel truncation
  // disabled so the finite-difference oracle is valid along the whole path.
  {
    S2RMConfig cfg;
    cfg.modules = 2;
    cfg.hidden = 4;
    cfg.encoding = 5;
    cfg.enc_hidden = 6;
    cfg.dec_hidden = 6;
    cfg.embedding = 4;
    cfg.input_heads = 2;
    cfg.input_key = 3;
    cfg.input_value = 3;
    cfg.ic_heads = 2;
    cfg.ic_key = 3;
    cfg.ic_value = 3;
    cfg.gate_hidden = 4;
    cfg.kernel = KernelConfig{1.0, -1.0};
    S2GruModel model(cfg, 23);
    Rng rng(24);
    std::vector<Crop> obs(3);
    for (Crop& c : obs) {
      c.row = static_cast<int>(rng.uniform_int(38)) + 5;
      c.col = static_cast<int>(rng.uniform_int(38)) + 5;
      c.values.resize(kCropArea);
      for (auto& v : c.values) v = rng.uniform() < 0.15 ? 1.0 : 0.0;
    }
    std::vector<double> target(kCropArea);
    for (auto& v : target) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
    Tensor target_t = Tensor::from({kCropArea}, target);
    auto loss = [&](Tensor&) {
      S2RMState s = model.initial_state();
      s = model.step(s, obs);
      s = model.step(s, obs);  // second step exercises state-carried paths
      Tensor logits = model.query_logits(s, 17.0, 23.0);
      return bce_with_logits_mean(logits, target_t);
    };
    ParamStore& store = model.params();
    for (std::size_t i = 0; i < store.count(); ++i) {
      const double err = grad_check(loss, store.tensor(i), kStep);
      check(report, "composition/" + store.name(i), err, kCompositionTol, true);
    }
  }

  report.pass = true;
  for (const GradSuiteEntry& e : report.entries) report.pass = report.pass && e.pass;
  return report;
}

}  // namespace s2rm
