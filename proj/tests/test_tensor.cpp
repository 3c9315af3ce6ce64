#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "s2rm/rng.hpp"
#include "s2rm/tensor.hpp"

using namespace s2rm;

namespace {

Tensor random_param(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::param(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("contract matches hand-evaluated examples") {
  // Identity contraction.
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = contract("ij,jk->ik", eye, b);
  CHECK(c.shape() == Shape{2, 2});
  for (int i = 0; i < 4; ++i) CHECK(c.data()[i] == b.data()[i]);

  // Dot product.
  Tensor u = Tensor::from({2}, {1, 2});
  Tensor v = Tensor::from({2}, {3, 4});
  CHECK(contract("a,a->", u, v).item() == doctest::Approx(11.0));

  // All-ones (2,3,1) x (3,1,2) -> (2,1,2), every entry 3.
  Tensor x = Tensor::constant({2, 3, 1}, 1.0);
  Tensor y = Tensor::constant({3, 1, 2}, 1.0);
  Tensor z = contract("mak,akv->mkv", x, y);
  CHECK(z.shape() == Shape{2, 1, 2});
  for (double e : z.data()) CHECK(e == doctest::Approx(3.0));
}

TEST_CASE("contract rejects extent mismatches") {
  Tensor a = Tensor::constant({2, 3}, 1.0);
  Tensor b = Tensor::constant({4, 2}, 1.0);
  CHECK_THROWS_AS(contract("ij,jk->ik", a, b), DimensionError);
}

TEST_CASE("elementwise scalar examples") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));
  CHECK(tanh(Tensor::scalar(0.0)).item() == doctest::Approx(0.0));
  CHECK(exp(Tensor::scalar(-0.8)).item() == doctest::Approx(0.449329).epsilon(1e-5));
}

TEST_CASE("elementwise broadcasting follows trailing-axis rules") {
  Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = Tensor::from({3}, {10, 20, 30});
  Tensor s = add(m, r);
  std::vector<double> want{11, 22, 33, 14, 25, 36};
  for (int i = 0; i < 6; ++i) CHECK(s.data()[i] == doctest::Approx(want[i]));

  Tensor col = Tensor::from({2, 1}, {10, 100});
  Tensor p = mul(m, col);
  std::vector<double> want2{10, 20, 30, 400, 500, 600};
  for (int i = 0; i < 6; ++i) CHECK(p.data()[i] == doctest::Approx(want2[i]));

  Tensor bad = Tensor::constant({4}, 1.0);
  CHECK_THROWS_AS(add(m, bad), DimensionError);
}

TEST_CASE("elementwise dispatcher covers all kinds") {
  Tensor a = Tensor::from({2}, {1.0, -1.0});
  Tensor b = Tensor::from({2}, {2.0, 3.0});
  CHECK(elementwise(ElementwiseKind::kAdd, a, &b).data()[0] == doctest::Approx(3.0));
  CHECK(elementwise(ElementwiseKind::kSub, a, &b).data()[1] == doctest::Approx(-4.0));
  CHECK(elementwise(ElementwiseKind::kMul, a, &b).data()[1] == doctest::Approx(-3.0));
  CHECK(elementwise(ElementwiseKind::kScale, a, nullptr, 2.5).data()[0] == doctest::Approx(2.5));
  CHECK(elementwise(ElementwiseKind::kSigmoid, Tensor::scalar(0.0)).item() == doctest::Approx(0.5));
}

TEST_CASE("softmax examples and shift invariance") {
  Tensor u = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0));

  CHECK(softmax(Tensor::from({1}, {7.3}), 0).data()[0] == doctest::Approx(1.0));

  Tensor w = softmax(Tensor::from({2}, {1, 2}), 0);
  CHECK(w.data()[0] == doctest::Approx(0.26894).epsilon(1e-4));
  CHECK(w.data()[1] == doctest::Approx(0.73106).epsilon(1e-4));

  // Subtracting a constant along the axis leaves the output unchanged.
  Rng rng(11);
  std::vector<double> raw(12);
  for (auto& v : raw) v = rng.uniform(-3, 3);
  Tensor x0 = Tensor::from({3, 4}, raw);
  for (auto& v : raw) v -= 17.25;
  Tensor x1 = Tensor::from({3, 4}, raw);
  Tensor y0 = softmax(x0, 1), y1 = softmax(x1, 1);
  for (int i = 0; i < 12; ++i)
    CHECK(y0.data()[i] == doctest::Approx(y1.data()[i]).epsilon(1e-12));

  // Sums to one along the axis.
  Tensor sums = reduce_sum(y0, 1);
  for (double v : sums.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("reduce, concat, l2_normalize basics") {
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor s0 = reduce_sum(m, 0);
  CHECK(s0.data()[0] == doctest::Approx(4.0));
  CHECK(s0.data()[1] == doctest::Approx(6.0));

  Tensor c = concat({Tensor::from({1}, {1}), Tensor::from({1}, {2})}, 0);
  CHECK(c.shape() == Shape{2});
  CHECK(c.data()[0] == doctest::Approx(1.0));
  CHECK(c.data()[1] == doctest::Approx(2.0));

  Tensor n = l2_normalize(Tensor::from({2}, {3, 4}), 0);
  CHECK(n.data()[0] == doctest::Approx(0.6));
  CHECK(n.data()[1] == doctest::Approx(0.8));

  CHECK_THROWS_AS(l2_normalize(Tensor::zeros({3}), 0), DegenerateInputError);
}

TEST_CASE("affine matches a hand-computed case") {
  Tensor x = Tensor::from({2, 3}, {1, 0, 2, 0, 1, 1});
  Tensor w = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({2}, {0.5, -0.5});
  Tensor y = affine(x, w, b);
  CHECK(y.data()[0] == doctest::Approx(1 * 1 + 2 * 5 + 0.5));
  CHECK(y.data()[1] == doctest::Approx(1 * 2 + 2 * 6 - 0.5));
  CHECK(y.data()[2] == doctest::Approx(3 + 5 + 0.5));
  CHECK(y.data()[3] == doctest::Approx(4 + 6 - 0.5));
  CHECK_THROWS_AS(affine(Tensor::zeros({4}), w, b), DimensionError);
}

TEST_CASE("grad_check: quadratic, sigmoid sum, softmax component") {
  // f(x) = 0.5 |x|^2, gradient is x.
  Tensor x = random_param({5}, 101);
  auto quad = [](Tensor& t) { return scale_shift(reduce_sum_all(mul(t, t)), 0.5, 0.0); };
  CHECK(grad_check(quad, x, 1e-5) < 1e-8);

  Tensor x2 = random_param({7}, 102);
  auto sigsum = [](Tensor& t) { return reduce_sum_all(sigmoid(t)); };
  CHECK(grad_check(sigsum, x2, 1e-5) < 1e-6);

  Tensor x3 = random_param({4}, 103);
  auto sm0 = [](Tensor& t) { return row(softmax(t, 0), 0); };
  CHECK(grad_check(sm0, x3, 1e-5) < 1e-6);
}

TEST_CASE("grad_check covers every primitive") {
  const double step = 1e-5;
  const double tol = 1e-6;

  SUBCASE("contract both operands") {
    Tensor a = random_param({3, 4}, 1);
    Tensor b = random_param({4, 2}, 2);
    auto fa = [&](Tensor& t) { return reduce_sum_all(contract("ij,jk->ik", t, b)); };
    CHECK(grad_check(fa, a, step) < tol);
    auto fb = [&](Tensor& t) { return reduce_sum_all(contract("ij,jk->ik", a, t)); };
    CHECK(grad_check(fb, b, step) < tol);
  }

  SUBCASE("contract with summed-out label") {
    Tensor a = random_param({2, 3, 2}, 3);
    Tensor b = random_param({3, 2, 2}, 4);
    auto f = [&](Tensor& t) { return reduce_sum_all(contract("mak,akv->mkv", t, b)); };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("broadcast add and mul") {
    Tensor a = random_param({3, 4}, 5);
    Tensor r = random_param({4}, 6);
    auto f1 = [&](Tensor& t) { return reduce_sum_all(mul(add(t, r), add(t, r))); };
    CHECK(grad_check(f1, a, step) < tol);
    auto f2 = [&](Tensor& t) { return reduce_sum_all(mul(a, t)); };
    CHECK(grad_check(f2, r, step) < tol);
  }

  SUBCASE("sub and scale_shift") {
    Tensor a = random_param({4}, 7);
    Tensor b = random_param({4}, 8);
    auto f = [&](Tensor& t) {
      return reduce_sum_all(mul(sub(t, b), scale_shift(t, -2.0, 0.25)));
    };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("exp and tanh") {
    Tensor a = random_param({5}, 9, 0.5);
    auto f = [&](Tensor& t) { return reduce_sum_all(mul(exp(t), tanh(t))); };
    CHECK(grad_check(f, a, step) < 1e-5);
  }

  SUBCASE("softmax over inner axis") {
    Tensor a = random_param({2, 5}, 10);
    auto f = [&](Tensor& t) {
      Tensor y = softmax(t, 1);
      return reduce_sum_all(mul(y, y));
    };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("reduce_sum by axis") {
    Tensor a = random_param({3, 2}, 11);
    auto f = [&](Tensor& t) {
      Tensor s = reduce_sum(t, 0);
      return reduce_sum_all(mul(s, s));
    };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("concat") {
    Tensor a = random_param({2, 2}, 12);
    Tensor b = random_param({3, 2}, 13);
    auto f = [&](Tensor& t) {
      Tensor c = concat({t, b}, 0);
      return reduce_sum_all(mul(c, c));
    };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("affine in all arguments") {
    Tensor x = random_param({3, 4}, 14);
    Tensor w = random_param({4, 2}, 15);
    Tensor b = random_param({2}, 16);
    auto fx = [&](Tensor& t) { return reduce_sum_all(tanh(affine(t, w, b))); };
    CHECK(grad_check(fx, x, step) < tol);
    auto fw = [&](Tensor& t) { return reduce_sum_all(tanh(affine(x, t, b))); };
    CHECK(grad_check(fw, w, step) < tol);
    auto fb = [&](Tensor& t) { return reduce_sum_all(tanh(affine(x, w, t))); };
    CHECK(grad_check(fb, b, step) < tol);
  }

  SUBCASE("l2_normalize") {
    Tensor a = random_param({3, 4}, 17);
    Tensor probe = Tensor::from({3, 4}, [] {
      Rng r(18);
      std::vector<double> v(12);
      for (auto& e : v) e = r.normal();
      return v;
    }());
    auto f = [&](Tensor& t) { return reduce_sum_all(mul(l2_normalize(t, 1), probe)); };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("reshape, row, stack_rows") {
    Tensor a = random_param({2, 3}, 19);
    auto f = [&](Tensor& t) {
      Tensor r0 = row(t, 0);
      Tensor r1 = row(t, 1);
      Tensor s = stack_rows({r1, r0});
      Tensor back = reshape(s, {6});
      return reduce_sum_all(mul(back, back));
    };
    CHECK(grad_check(f, a, step) < tol);
  }

  SUBCASE("bce_with_logits_mean") {
    Tensor l = random_param({6}, 20);
    Tensor t = Tensor::from({6}, {1, 0, 1, 1, 0, 0});
    auto f = [&](Tensor& u) { return bce_with_logits_mean(u, t); };
    CHECK(grad_check(f, l, step) < tol);
  }

  SUBCASE("unary_custom with matching derivative") {
    Tensor a = random_param({5}, 21);
    auto f = [&](Tensor& t) {
      Tensor y = unary_custom(
          t, [](double v) { return v * v * v; }, [](double v) { return 3.0 * v * v; });
      return reduce_sum_all(y);
    };
    CHECK(grad_check(f, a, step) < tol);
  }
}

TEST_CASE("bce value examples") {
  Tensor zeros = Tensor::zeros({4});
  Tensor ones = Tensor::constant({4}, 1.0);
  CHECK(bce_with_logits_mean(zeros, ones).item() == doctest::Approx(std::log(2.0)));
  Tensor big = Tensor::constant({4}, 50.0);
  CHECK(bce_with_logits_mean(big, ones).item() == doctest::Approx(0.0).epsilon(1e-12));
  // loss(l, 1) == loss(-l, 0)
  Tensor l = Tensor::from({3}, {0.3, -1.2, 2.0});
  Tensor nl = Tensor::from({3}, {-0.3, 1.2, -2.0});
  CHECK(bce_with_logits_mean(l, Tensor::constant({3}, 1.0)).item() ==
        doctest::Approx(bce_with_logits_mean(nl, Tensor::zeros({3})).item()));
  CHECK_THROWS_AS(bce_with_logits_mean(l, Tensor::constant({3}, 0.5)), InputError);
}

TEST_CASE("unused leaves keep exactly zero gradient") {
  Tensor used = random_param({3}, 30);
  Tensor unused = random_param({3}, 31);
  Tape tape;
  Tensor y = reduce_sum_all(mul(used, used));
  tape.backward(y);
  for (double v : unused.grad()) CHECK(v == 0.0);
  bool any_nonzero = false;
  for (double v : used.grad()) any_nonzero = any_nonzero || v != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("backward accumulates additively across independent graphs") {
  Tensor x = Tensor::param({2}, {1.0, 2.0});
  {
    Tape tape;
    tape.backward(reduce_sum_all(mul(x, x)));  // gradient 2x
  }
  std::vector<double> first(x.grad().begin(), x.grad().end());
  {
    Tape tape;
    tape.backward(reduce_sum_all(x));  // gradient 1
  }
  CHECK(x.grad()[0] == doctest::Approx(first[0] + 1.0));
  CHECK(x.grad()[1] == doctest::Approx(first[1] + 1.0));
}

TEST_CASE("backward into an external sink leaves leaf buffers untouched") {
  Tensor x = Tensor::param({2}, {3.0, -1.0});
  GradMap sink;
  {
    Tape tape;
    tape.backward(reduce_sum_all(mul(x, x)), sink);
  }
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
  const auto& g = sink.at(x.id());
  CHECK(g[0] == doctest::Approx(6.0));
  CHECK(g[1] == doctest::Approx(-2.0));
}

TEST_CASE("forward evaluation is bit-deterministic") {
  Tensor a = random_param({4, 5}, 40);
  Tensor b = random_param({5, 3}, 41);
  auto run = [&]() {
    Tensor y = softmax(contract("ij,jk->ik", tanh(a), b), 1);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  auto r1 = run(), r2 = run();
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("ParamStore keeps insertion order and rejects duplicates") {
  ParamStore store;
  store.add("b", Tensor::param({1}, {1}));
  store.add("a", Tensor::param({2}, {1, 2}));
  CHECK(store.count() == 2);
  CHECK(store.name(0) == "b");
  CHECK(store.name(1) == "a");
  CHECK(store.total_size() == 3);
  CHECK_THROWS_AS(store.add("a", Tensor::param({1}, {0})), Error);
  store.zero_grad();
}
