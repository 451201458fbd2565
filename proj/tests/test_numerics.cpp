#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "mivhead/error.hpp"
#include "mivhead/grad_check.hpp"
#include "mivhead/ops.hpp"
#include "test_support.hpp"

using namespace mivhead;
using mivhead::testing::normal_tensor;
using mivhead::testing::random_tensor;
using mivhead::testing::weighted_total;

TEST_CASE("softmax of equal logits is uniform") {
  Tape t;
  Var y = ops::softmax(t.constant(Tensor({2}, {0.0, 0.0})), 0);
  CHECK(y.value()[0] == 0.5);
  CHECK(y.value()[1] == 0.5);
}

TEST_CASE("logsumexp identity cases") {
  Tape t;
  CHECK(ops::logsumexp(t.constant(Tensor({2}, {0.0, 0.0})), 0).value().item() ==
        doctest::Approx(0.693147).epsilon(1e-6));
  const double a = 3.25;
  CHECK(ops::logsumexp(t.constant(Tensor({2}, {a, a})), 0).value().item() ==
        doctest::Approx(a + std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("cross entropy of a confident correct prediction") {
  Tape t;
  const std::size_t label = 0;
  Var l = ops::cross_entropy(t.constant(Tensor({2}, {10.0, -10.0})), std::span<const std::size_t>(&label, 1));
  // ln(1 + e^-20)
  CHECK(l.value().item() == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-6));
  CHECK(l.value().item() == doctest::Approx(2.06e-9).epsilon(1e-2));
}

namespace {

// Brute-force adaptive max pool written from the region definition.
Tensor pool_oracle(const Tensor& x, std::size_t oh, std::size_t ow) {
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  Tensor out({oh, ow, C});
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        const auto r0 = static_cast<std::size_t>(std::floor(double(i) * H / oh));
        const auto r1 = static_cast<std::size_t>(std::ceil(double(i + 1) * H / oh));
        const auto c0 = static_cast<std::size_t>(std::floor(double(j) * W / ow));
        const auto c1 = static_cast<std::size_t>(std::ceil(double(j + 1) * W / ow));
        double m = -INFINITY;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t q = c0; q < c1; ++q) m = std::max(m, x[(r * W + q) * C + c]);
        out[(i * ow + j) * C + c] = m;
      }
  return out;
}

}  // namespace

TEST_CASE("adaptive max pool") {
  Tensor x({4, 4, 1});
  std::iota(x.data().begin(), x.data().end(), 1.0);

  SUBCASE("4x4 to 2x2") {
    Tensor y = ops::adaptive_max_pool_2d(x, 2, 2);
    CHECK(y == Tensor({2, 2, 1}, {6, 8, 14, 16}));
  }
  SUBCASE("identity target") { CHECK(ops::adaptive_max_pool_2d(x, 4, 4) == x); }
  SUBCASE("global max per channel") {
    std::mt19937_64 rng(3);
    Tensor z = random_tensor({5, 3, 4}, rng);
    Tensor y = ops::adaptive_max_pool_2d(z, 1, 1);
    for (std::size_t c = 0; c < 4; ++c) {
      double m = -INFINITY;
      for (std::size_t p = 0; p < 15; ++p) m = std::max(m, z[p * 4 + c]);
      CHECK(y[c] == m);
    }
  }
  SUBCASE("overlapping regions match brute force") {
    std::mt19937_64 rng(11);
    for (std::size_t H = 1; H <= 9; ++H)
      for (std::size_t oh = 1; oh <= H; ++oh) {
        Tensor z = random_tensor({H, H + 1, 2}, rng);
        const std::size_t ow = std::min(H + 1, oh + 1);
        CHECK(ops::adaptive_max_pool_2d(z, oh, ow) == pool_oracle(z, oh, ow));
      }
  }
  SUBCASE("out of range target") {
    CHECK_THROWS_AS(ops::adaptive_max_pool_2d(x, 5, 4), ShapeError);
    CHECK_THROWS_AS(ops::adaptive_max_pool_2d(x, 0, 1), ShapeError);
  }
  SUBCASE("ties route the gradient to the first maximal element") {
    Tape t;
    Var v = t.parameter(Tensor({2, 2, 1}, {1.0, 7.0, 7.0, 7.0}), "x");
    Var y = ops::adaptive_max_pool_2d(v, 1, 1);
    t.backward(ops::sum(ops::reshape(y, {1}), 0));
    CHECK(t.grad(v) == Tensor({2, 2, 1}, {0.0, 1.0, 0.0, 0.0}));
  }
}

TEST_CASE("grad_check trivial objectives") {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({6}, rng);
  SUBCASE("linear") {
    auto f = [&](Tape& t, const std::vector<Var>& p) {
      return ops::sum(ops::mul(p[0], t.constant(x)), 0);
    };
    auto r = grad_check(f, {{"w", random_tensor({6}, rng)}});
    CHECK(r.passed());
    CHECK(r.max_rel_error < 1e-10);
  }
  SUBCASE("constant") {
    auto f = [&](Tape& t, const std::vector<Var>&) { return t.constant(Tensor::scalar(4.0)); };
    auto r = grad_check(f, {{"w", random_tensor({6}, rng)}});
    CHECK(r.passed());
    CHECK(r.max_rel_error == 0.0);
    CHECK(r.checked == 6);
  }
  SUBCASE("non-finite objective") {
    auto f = [&](Tape&, const std::vector<Var>& p) { return ops::sum(ops::log(p[0]), 0); };
    CHECK_THROWS_AS(grad_check(f, {{"w", Tensor({1}, {1e-6})}}, 1e-5), NumericError);
  }
}

TEST_CASE("tape bookkeeping") {
  Tape t;
  Var a = t.parameter(Tensor({2}, {1.0, 2.0}), "a");
  Var unused = t.parameter(Tensor({3}, {1.0, 2.0, 3.0}), "unused");
  Var y = ops::sum(ops::mul(a, a), 0);
  t.backward(y);
  CHECK(t.grad(a) == Tensor({2}, {2.0, 4.0}));
  CHECK(t.grad(unused) == Tensor({3}, 0.0));
  CHECK(t.backward_visits() == 2);
  CHECK(t.parameters().size() == 2);
  CHECK(t.parameter_name(1) == "unused");
}

TEST_CASE("error conditions") {
  Tape t;
  Var a = t.constant(Tensor({2, 3}, 1.0));
  Var b = t.constant(Tensor({4}, 1.0));
  CHECK_THROWS_AS(ops::add(a, b), ShapeError);
  CHECK_THROWS_AS(ops::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ops::softmax(a, 2), ShapeError);
  CHECK_THROWS_AS(ops::log(t.constant(Tensor({1}, {-1.0}))), NumericError);
  CHECK_THROWS_AS(ops::exp(t.constant(Tensor({1}, {1000.0}))), NumericError);
}

TEST_CASE("segment softmax with a mask") {
  Tape t;
  Var x = t.constant(Tensor({1, 5}, {0.0, 0.0, 1.0, 2.0, 3.0}));
  const std::vector<ops::Segment> segs{{0, 2}, {2, 5}};
  Tensor mask({1, 5}, {1, 1, 1, 0, 1});
  Var y = ops::segment_softmax(x, 1, segs, &mask);
  CHECK(y.value()[0] == 0.5);
  CHECK(y.value()[1] == 0.5);
  CHECK(y.value()[3] == 0.0);
  CHECK(y.value()[2] + y.value()[4] == doctest::Approx(1.0).epsilon(1e-15));
  Tensor all_masked({1, 5}, {0, 0, 1, 1, 1});
  CHECK_THROWS_AS(ops::segment_softmax(x, 1, segs, &all_masked), ShapeError);
}

TEST_CASE("softmax sums to one and is permutation equivariant") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = normal_tensor({9}, rng, 5.0);
    Tape t;
    const Tensor y = ops::softmax(t.constant(x), 0).value();
    double s = 0.0;
    for (double v : y.data()) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);

    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor xp({9});
    for (std::size_t i = 0; i < 9; ++i) xp[i] = x[perm[i]];
    const Tensor yp = ops::softmax(t.constant(xp), 0).value();
    for (std::size_t i = 0; i < 9; ++i) CHECK(yp[i] == y[perm[i]]);
  }
}

TEST_CASE("logsumexp bounds") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> len(1, 12);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(len(rng));
    Tensor x = normal_tensor({n}, rng, 20.0);
    Tape t;
    const double l = ops::logsumexp(t.constant(x), 0).value().item();
    const double m = *std::max_element(x.data().begin(), x.data().end());
    CHECK(l >= m);
    CHECK(l <= m + std::log(double(n)) + 1e-12);
  }
}

TEST_CASE("l2_normalize output norm") {
  // ||y|| = ||x|| / (||x|| + eps) exactly, so the gap to 1 is eps/||x||.
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const double target = std::pow(10.0, -3.0 + 6.0 * (trial / 200.0));
    Tensor x = normal_tensor({7}, rng);
    double n0 = 0.0;
    for (double v : x.data()) n0 += v * v;
    n0 = std::sqrt(n0);
    for (auto& v : x.data()) v *= target / n0;
    Tape t;
    const Tensor y = ops::l2_normalize(t.constant(x), 0).value();
    double ny = 0.0;
    for (double v : y.data()) ny += v * v;
    ny = std::sqrt(ny);
    CHECK(ny == doctest::Approx(target / (target + ops::kNormEps)).epsilon(1e-12));
    CHECK(1.0 - ny <= ops::kNormEps / target + 1e-14);
    if (target >= 1e3) CHECK(std::abs(1.0 - ny) <= 1e-9);
  }
}

TEST_CASE("reductions are bitwise invariant to element order") {
  std::mt19937_64 rng(31);
  Tensor x = normal_tensor({6, 3}, rng);
  Tensor xr({6, 3});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) xr[(5 - i) * 3 + j] = x[i * 3 + j];
  Tape t;
  CHECK(ops::sum(t.constant(x), 0, ops::SumOrder::canonical).value() ==
        ops::sum(t.constant(xr), 0, ops::SumOrder::canonical).value());
  CHECK(ops::mean(t.constant(x), 0, ops::SumOrder::canonical).value() ==
        ops::mean(t.constant(xr), 0, ops::SumOrder::canonical).value());
  CHECK(ops::logsumexp(t.constant(x), 0).value() == ops::logsumexp(t.constant(xr), 0).value());
}

TEST_CASE("evaluation is deterministic") {
  std::mt19937_64 rng(2);
  const Tensor x = normal_tensor({4, 5}, rng);
  const Tensor w = normal_tensor({5, 5}, rng);
  auto run = [&] {
    Tape t;
    Var h = ops::layer_norm(ops::matmul(t.constant(x), t.constant(w)), t.constant(Tensor({5}, 1.0)),
                            t.constant(Tensor({5}, 0.0)));
    return ops::softmax(ops::l2_normalize(h, 1), 0).value();
  };
  CHECK(run() == run());
}

// Every op with a backward rule, checked against central differences on
// random small tensors.
namespace {

struct OpCase {
  const char* name;
  std::function<std::vector<NamedTensor>(std::mt19937_64&)> params;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Var>;
  auto one = [](Shape s, double lo = -1.0, double hi = 1.0) {
    return [s, lo, hi](std::mt19937_64& r) { return std::vector<NamedTensor>{{"x", random_tensor(s, r, lo, hi)}}; };
  };
  auto two = [](Shape a, Shape b) {
    return [a, b](std::mt19937_64& r) {
      return std::vector<NamedTensor>{{"a", random_tensor(a, r)}, {"b", random_tensor(b, r)}};
    };
  };
  std::vector<OpCase> cases;
  cases.push_back({"add", two({3, 4}, {4}), [](Tape&, const V& p) { return ops::add(p[0], p[1]); }});
  cases.push_back({"sub", two({3, 1}, {1, 4}), [](Tape&, const V& p) { return ops::sub(p[0], p[1]); }});
  cases.push_back({"mul", two({2, 3, 4}, {3, 1}), [](Tape&, const V& p) { return ops::mul(p[0], p[1]); }});
  cases.push_back({"scale", one({5}), [](Tape&, const V& p) { return ops::scale(p[0], -2.5); }});
  cases.push_back({"add_scalar", one({5}), [](Tape&, const V& p) { return ops::add_scalar(p[0], 0.3); }});
  cases.push_back({"abs", one({6}, 0.1, 1.0), [](Tape& t, const V& p) {
                     return ops::abs(ops::mul(p[0], t.constant(Tensor({6}, {1, -1, 1, -1, 1, -1}))));
                   }});
  cases.push_back({"exp", one({5}), [](Tape&, const V& p) { return ops::exp(p[0]); }});
  cases.push_back({"log", one({5}, 0.5, 2.0), [](Tape&, const V& p) { return ops::log(p[0]); }});
  cases.push_back({"sigmoid", one({5}, -3, 3), [](Tape&, const V& p) { return ops::sigmoid(p[0]); }});
  cases.push_back({"matmul", two({3, 4}, {4, 2}), [](Tape&, const V& p) { return ops::matmul(p[0], p[1]); }});
  cases.push_back({"bmm", two({2, 3, 4}, {2, 4, 2}), [](Tape&, const V& p) { return ops::bmm(p[0], p[1]); }});
  cases.push_back({"transpose", one({3, 4}), [](Tape&, const V& p) { return ops::transpose(p[0]); }});
  cases.push_back({"reshape", one({3, 4}), [](Tape&, const V& p) { return ops::reshape(p[0], {2, 6}); }});
  cases.push_back({"broadcast_to", one({3, 1}), [](Tape&, const V& p) { return ops::broadcast_to(p[0], {2, 3, 4}); }});
  cases.push_back({"concat", two({2, 3}, {2, 2}), [](Tape&, const V& p) {
                     const std::vector<Var> xs{p[0], p[1]};
                     return ops::concat(xs, 1);
                   }});
  cases.push_back({"stack", two({2, 3}, {2, 3}), [](Tape&, const V& p) {
                     const std::vector<Var> xs{p[0], p[1], p[0]};
                     return ops::stack(xs);
                   }});
  cases.push_back({"slice", one({4, 5}), [](Tape&, const V& p) { return ops::slice(p[0], 1, 1, 4); }});
  cases.push_back({"take", one({4, 3}), [](Tape&, const V& p) { return ops::take(p[0], 0, {3, 0, 3}); }});
  cases.push_back({"sum", one({3, 4, 2}), [](Tape&, const V& p) { return ops::sum(p[0], 1); }});
  cases.push_back({"mean", one({3, 4}), [](Tape&, const V& p) { return ops::mean(p[0], 0); }});
  cases.push_back({"softmax", one({3, 4}, -2, 2), [](Tape&, const V& p) { return ops::softmax(p[0], 1); }});
  cases.push_back({"logsumexp", one({3, 4}, -2, 2), [](Tape&, const V& p) { return ops::logsumexp(p[0], 0); }});
  cases.push_back({"l2_normalize", one({3, 5}), [](Tape&, const V& p) { return ops::l2_normalize(p[0], 1); }});
  cases.push_back({"layer_norm",
                   [](std::mt19937_64& r) {
                     return std::vector<NamedTensor>{{"x", random_tensor({3, 6}, r)},
                                                     {"g", random_tensor({6}, r, 0.5, 1.5)},
                                                     {"b", random_tensor({6}, r)}};
                   },
                   [](Tape&, const V& p) { return ops::layer_norm(p[0], p[1], p[2]); }});
  cases.push_back({"segment_softmax", one({2, 5, 2}, -2, 2), [](Tape&, const V& p) {
                     static const std::vector<ops::Segment> segs{{0, 2}, {2, 5}};
                     static const Tensor mask({2, 5}, {1, 1, 0, 1, 1, 1, 0, 1, 1, 1});
                     return ops::segment_softmax(p[0], 1, segs, &mask);
                   }});
  cases.push_back({"segment_sum", one({2, 5, 3}), [](Tape&, const V& p) {
                     static const std::vector<ops::Segment> segs{{0, 1}, {1, 5}};
                     return ops::segment_sum(p[0], 1, segs);
                   }});
  cases.push_back({"adaptive_max_pool_2d", one({5, 4, 2}),
                   [](Tape&, const V& p) { return ops::adaptive_max_pool_2d(p[0], 3, 2); }});
  cases.push_back({"cross_entropy", one({3, 4}, -3, 3), [](Tape&, const V& p) {
                     static const std::vector<std::size_t> labels{2, 0, 3};
                     return ops::cross_entropy(p[0], labels);
                   }});
  return cases;
}

}  // namespace

TEST_CASE("every backward rule matches finite differences (100 seeds)") {
  for (const auto& c : op_cases()) {
    double worst = 0.0;
    std::size_t failures = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 17);
      auto params = c.params(rng);
      // Output weights are drawn once per seed and held fixed.
      Tape probe;
      std::vector<Var> leaves;
      for (auto& p : params) leaves.push_back(probe.constant(p.value));
      const Tensor w = random_tensor(c.build(probe, leaves).shape(), rng);
      auto f = [&](Tape& t, const std::vector<Var>& p) { return weighted_total(c.build(t, p), w); };
      auto r = grad_check(f, params, 1e-5, 1e-4);
      worst = std::max(worst, r.max_rel_error);
      failures += r.failures.size();
    }
    INFO("op " << c.name << " worst rel error " << worst);
    CHECK(failures == 0);
  }
}
