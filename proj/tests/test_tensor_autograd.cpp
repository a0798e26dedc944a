#include "catch_amalgamated.hpp"

#include <cmath>
#include <functional>

#include "fd_check.hpp"
#include "molem/autograd.hpp"
#include "molem/rng.hpp"

using namespace molem;
using molem::testing::fd_check;

namespace {

Parameter random_param(const std::string& name, std::size_t r, std::size_t c, Rng& rng, double sigma = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& x : t.data) x = rng.normal() * sigma;
  return Parameter(name, std::move(t));
}

}  // namespace

TEST_CASE("gradient of a sum is all ones") {
  Parameter x("x", Tensor::row_vector({0.3, -1.0, 2.5}));
  Tape tape;
  tape.backward(sum(tape.param(x)));
  CHECK(x.grad.data == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("gradient of x*x at 2 is 4") {
  Parameter x("x", Tensor::row_vector({2.0}));
  Tape tape;
  tape.backward(sum_squares(tape.param(x)));
  CHECK(x.grad.data[0] == 4.0);
}

TEST_CASE("two-layer MLP matches central differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Parameter x = random_param("x", 3, 5, rng);
    Parameter w1 = random_param("w1", 5, 7, rng, 0.5);
    Parameter b1 = random_param("b1", 1, 7, rng, 0.1);
    Parameter w2 = random_param("w2", 7, 4, rng, 0.5);
    const std::vector<int> targets{0, 3, 2};
    auto loss = [&](Tape& t) {
      Var h = gelu(add_row(matmul(t.param(x), t.param(w1)), t.param(b1)));
      return cross_entropy_sum(matmul(h, t.param(w2)), targets);
    };
    const auto r = fd_check({&x, &w1, &b1, &w2}, loss);
    INFO("seed " << seed);
    CHECK(r.max_rel_err < 1e-6);
  }
}

TEST_CASE("every differentiable op matches central differences") {
  using Op = std::function<Var(Tape&, Parameter&, Parameter&, Parameter&)>;
  // x: 4x6, y: 6x6, r: 1x6. Each op is reduced to a scalar through a fixed
  // random projection so every output entry contributes.
  const std::vector<std::pair<const char*, Op>> ops = {
      {"matmul", [](Tape& t, Parameter& x, Parameter& y, Parameter&) { return matmul(t.param(x), t.param(y)); }},
      {"add", [](Tape& t, Parameter& x, Parameter&, Parameter&) { return add(t.param(x), scale(t.param(x), 2.0)); }},
      {"sub", [](Tape& t, Parameter& x, Parameter& y, Parameter&) {
         return sub(t.param(x), slice_rows(t.param(y), 1, 4));
       }},
      {"add_row", [](Tape& t, Parameter& x, Parameter&, Parameter& r) { return add_row(t.param(x), t.param(r)); }},
      {"scale", [](Tape& t, Parameter& x, Parameter&, Parameter&) { return scale(t.param(x), -0.7); }},
      {"gelu", [](Tape& t, Parameter& x, Parameter&, Parameter&) { return gelu(t.param(x)); }},
      {"layer_norm", [](Tape& t, Parameter& x, Parameter& y, Parameter& r) {
         return layer_norm(t.param(x), t.param(r), slice_rows(t.param(y), 0, 1));
       }},
      {"gather_rows", [](Tape& t, Parameter& x, Parameter&, Parameter&) { return gather_rows(t.param(x), {3, 0, 3}); }},
      {"concat_rows", [](Tape& t, Parameter& x, Parameter& y, Parameter&) {
         return concat_rows({t.param(x), t.param(y)});
       }},
      {"causal_attention", [](Tape& t, Parameter& x, Parameter& y, Parameter&) {
         Var q = t.param(x);
         Var kv = slice_rows(t.param(y), 0, 4);
         return causal_attention(q, kv, matmul(kv, t.param(y)), 2, 0);
       }},
      {"cross_entropy", [](Tape& t, Parameter& x, Parameter&, Parameter&) {
         return cross_entropy_sum(t.param(x), {1, -1, 5, 0});
       }},
      {"sum_squares", [](Tape& t, Parameter& x, Parameter&, Parameter&) { return sum_squares(t.param(x)); }},
      {"softmax_row", [](Tape& t, Parameter&, Parameter&, Parameter& r) { return softmax_row(t.param(r)); }},
      {"gather_cols", [](Tape& t, Parameter&, Parameter&, Parameter& r) { return gather_cols(t.param(r), {4, 1}); }},
      {"scale_by", [](Tape& t, Parameter& x, Parameter&, Parameter& r) { return scale_by(t.param(x), t.param(r), 2); }},
      {"dot_const", [](Tape& t, Parameter&, Parameter&, Parameter& r) {
         return dot_const(t.param(r), {0.5, -1.0, 2.0, 0.25, 1.5, -0.75});
       }},
      {"cosine_scores", [](Tape& t, Parameter&, Parameter& y, Parameter& r) {
         return cosine_scores(t.param(r), t.param(y));
       }},
  };
  for (const auto& [name, op] : ops) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
      Rng rng(seed * 7919);
      Parameter x = random_param("x", 4, 6, rng);
      Parameter y = random_param("y", 6, 6, rng);
      Parameter r = random_param("r", 1, 6, rng);
      Tape probe(false);
      const Tensor shape = op(probe, x, y, r).value();
      std::vector<double> proj(shape.size());
      for (double& c : proj) c = rng.normal();
      auto loss = [&](Tape& t) {
        Var out = op(t, x, y, r);
        return dot_const(out, proj);
      };
      worst = std::max(worst, fd_check({&x, &y, &r}, loss).max_rel_err);
    }
    INFO(name);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("relu gradient away from the kink") {
  Parameter x("x", Tensor::row_vector({-2.0, -0.5, 0.5, 3.0}));
  Tape tape;
  tape.backward(sum(relu(tape.param(x))));
  CHECK(x.grad.data == std::vector<double>{0.0, 0.0, 1.0, 1.0});
}

TEST_CASE("frozen parameters receive no gradient") {
  Rng rng(7);
  Parameter w = random_param("w", 3, 3, rng);
  Parameter f = random_param("f", 3, 3, rng);
  f.frozen = true;
  Tape tape;
  tape.backward(sum_squares(matmul(tape.param(w), tape.param(f))));
  CHECK(w.has_grad());
  CHECK_FALSE(f.has_grad());
  CHECK(f.grad_norm_sq() == 0.0);
}

TEST_CASE("no-grad tape records nothing to differentiate") {
  Rng rng(8);
  Parameter w = random_param("w", 2, 2, rng);
  Tape tape(false);
  tape.backward(sum(tape.param(w)));
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("softmax") {
  SECTION("symmetric input") {
    const auto p = softmax(std::vector<double>{0.0, 0.0});
    CHECK(p == std::vector<double>{0.5, 0.5});
  }
  SECTION("large logits do not overflow") {
    const auto p = softmax(std::vector<double>{1000.0, 1000.0});
    CHECK(p == std::vector<double>{0.5, 0.5});
  }
  SECTION("matches an extended-precision oracle") {
    const auto p = softmax(std::vector<double>{1.0, 2.0, 3.0});
    const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    for (int i = 0; i < 3; ++i) {
      CHECK(p[i] == Catch::Approx(static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z)).epsilon(1e-15));
    }
  }
}

TEST_CASE("causal attention ignores later rows") {
  Rng rng(11);
  Parameter x = random_param("x", 5, 4, rng);
  Tape t1(false);
  const Tensor full = causal_attention(t1.param(x), t1.param(x), t1.param(x), 2, 0).value();
  Parameter head("head", Tensor({3, 4}, std::vector<double>(x.value.data.begin(), x.value.data.begin() + 12)));
  Tape t2(false);
  const Tensor part = causal_attention(t2.param(head), t2.param(head), t2.param(head), 2, 0).value();
  for (std::size_t i = 0; i < part.data.size(); ++i) CHECK(part.data[i] == full.data[i]);
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  Parameter logits("l", Tensor::matrix(1, 17, 0.25));
  Tape tape(false);
  CHECK(cross_entropy_sum(tape.param(logits), {5}).scalar() == Catch::Approx(std::log(17.0)).epsilon(1e-14));
}

TEST_CASE("cosine similarities") {
  const Tensor keys({3, 2}, std::vector<double>{1.0, 2.0, -2.0, 1.0, 3.0, 4.0});
  const auto s = cosine_similarities(std::vector<double>{1.0, 2.0}, keys, 1e-12, nullptr);
  CHECK(s[0] == Catch::Approx(1.0).epsilon(1e-15));
  CHECK(s[1] == 0.0);
  CHECK(s[2] == Catch::Approx(11.0 / (std::sqrt(5.0) * 5.0)).epsilon(1e-15));
  CHECK(s[2] == Catch::Approx(0.9839).margin(5e-5));
}

TEST_CASE("cosine of a zero vector is clamped, not NaN") {
  bool clamped = false;
  const Tensor keys({1, 2}, std::vector<double>{1.0, 0.0});
  const auto s = cosine_similarities(std::vector<double>{0.0, 0.0}, keys, 1e-12, &clamped);
  CHECK(clamped);
  CHECK(s[0] == 0.0);
}

TEST_CASE("tape ops are bitwise reproducible") {
  auto run = [] {
    Rng rng(5);
    Parameter a = random_param("a", 16, 16, rng);
    Parameter b = random_param("b", 16, 16, rng);
    Tape t;
    Var l = sum_squares(gelu(matmul(t.param(a), t.param(b))));
    t.backward(l);
    return std::make_pair(l.value(), a.grad);
  };
  const auto [l1, g1] = run();
  const auto [l2, g2] = run();
  CHECK(bitwise_equal(l1, l2));
  CHECK(bitwise_equal(g1, g2));
}
