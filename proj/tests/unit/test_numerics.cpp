#include <doctest.h>

#include <cmath>
#include <memory>

#include "versebyte/error.hpp"
#include "versebyte/grad_check.hpp"
#include "versebyte/graph.hpp"
#include "versebyte/rng.hpp"

using namespace versebyte;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& x : t.values()) x = scale * rng.normal();
  return t;
}

double checked(const Objective& f, std::vector<Tensor<double>> params) {
  return grad_check(f, std::move(params)).max_relative_error;
}

}  // namespace

TEST_CASE("tensor shape rules") {
  CHECK_THROWS_AS(Tensor<float>(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  Tensor<float> t({2, 3, 4});
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
}

TEST_CASE("matmul") {
  Graph<double> g;
  const auto a = g.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  const auto b = g.constant(Tensor<double>({2, 1}, {1, 1}));
  CHECK(matmul(a, b).value() == Tensor<double>({2, 1}, {3, 7}));

  Rng rng(1);
  const auto x = g.constant(random_tensor({2, 5}, rng));
  const auto eye = g.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  CHECK(matmul(eye, x).value() == x.value());

  const auto bad = g.constant(Tensor<double>({2, 3}));
  CHECK_THROWS_AS(matmul(bad, bad), ShapeError);
}

TEST_CASE("blocked kernels agree with a naive product") {
  Rng rng(2);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, std::tuple{5, 7, 33}, std::tuple{37, 64, 70}, std::tuple{64, 3, 129}}) {
    Graph<double> g;
    const auto a = random_tensor({std::size_t(m), std::size_t(k)}, rng);
    const auto b = random_tensor({std::size_t(k), std::size_t(n)}, rng);
    const auto c = matmul(g.constant(a), g.constant(b)).value();
    double worst = 0;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
        worst = std::max(worst, std::abs(s - c.at(i, j)));
      }
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("softmax") {
  Graph<double> g;
  const auto s = softmax(g.constant(Tensor<double>({1, 2}, {0, 0}))).value();
  CHECK(s[0] == doctest::Approx(0.5));
  const auto t = softmax(g.constant(Tensor<double>({1, 2}, {std::log(2.0), 0}))).value();
  CHECK(t[0] == doctest::Approx(2.0 / 3).epsilon(1e-6));
  CHECK(t[1] == doctest::Approx(1.0 / 3).epsilon(1e-6));
  const auto big = softmax(g.constant(Tensor<double>({1, 2}, {1000, 1000}))).value();
  CHECK(big[0] == 0.5);
  CHECK(big[1] == 0.5);
}

TEST_CASE("rms norm") {
  Graph<double> g;
  const auto ones = g.constant(Tensor<double>({2}, 1.0));
  const auto y = rms_norm(g.constant(Tensor<double>({1, 2}, {3, 4})), ones, 0.0).value();
  CHECK(y[0] == doctest::Approx(0.84853).epsilon(1e-4));
  CHECK(y[1] == doctest::Approx(1.13137).epsilon(1e-4));
  const auto z = rms_norm(g.constant(Tensor<double>({1, 2}, 0.0)), ones, 1e-6).value();
  CHECK(z == Tensor<double>({1, 2}, 0.0));
  const auto zero_gain = rms_norm(g.constant(Tensor<double>({1, 2}, {3, 4})), g.constant(Tensor<double>({2})), 1e-6);
  CHECK(zero_gain.value() == Tensor<double>({1, 2}, 0.0));
}

TEST_CASE("gelu and cross entropy closed forms") {
  Graph<double> g;
  CHECK(gelu(g.constant(Tensor<double>::scalar(0))).value()[0] == 0.0);

  const std::vector<int> targets = {5, 200, 7};
  const auto logits = g.parameter(Tensor<double>({3, 259}, 0.25));
  const auto loss = cross_entropy(logits, std::span<const int>(targets), 0);
  CHECK(loss.value()[0] == doctest::Approx(std::log(259.0)).epsilon(1e-4));

  const std::vector<int> ignored = {0, 0, 0};
  const auto none = cross_entropy(logits, std::span<const int>(ignored), 0);
  CHECK(none.value()[0] == 0.0);
  g.backward(none);
  for (double x : g.grad(logits).values()) CHECK(x == 0.0);

  const std::vector<int> out_of_range = {5, 300, 7};
  CHECK_THROWS_AS(cross_entropy(logits, std::span<const int>(out_of_range), 0), RangeError);
}

TEST_CASE("grad check of closed forms") {
  const Objective squares = [](Graph<double>&, std::span<const Var<double>> p) { return sum(mul(p[0], p[0])); };
  const auto result = grad_check(squares, {Tensor<double>({3}, {1, 2, 3})});
  CHECK(result.max_relative_error < 1e-7);
  CHECK(result.coordinates == 3);

  const Objective constant = [](Graph<double>& g, std::span<const Var<double>>) {
    return g.constant(Tensor<double>::scalar(4.0));
  };
  const auto flat = grad_check(constant, {Tensor<double>({2}, {1, 2})});
  CHECK(flat.analytic == 0.0);
  CHECK(flat.numeric == 0.0);

  const Objective vector_valued = [](Graph<double>&, std::span<const Var<double>> p) { return p[0]; };
  CHECK_THROWS_AS(grad_check(vector_valued, {Tensor<double>({2})}), ShapeError);
}

TEST_CASE("every op passes a gradient check") {
  Rng rng(3);
  CHECK(checked([](Graph<double>&, std::span<const Var<double>> p) { return sum(mul(matmul(p[0], p[1]), p[2])); },
                {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({3, 5}, rng)}) < 1e-6);
  CHECK(checked(
            [](Graph<double>&, std::span<const Var<double>> p) {
              return sum(mul(matmul_transposed(p[0], p[1]), p[2]));
            },
            {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({3, 5}, rng)}) < 1e-6);
  const auto w = random_tensor({4, 6}, rng);
  CHECK(checked(
            [&](Graph<double>& g, std::span<const Var<double>> p) {
              return sum(mul(softmax(p[0]), g.constant(w)));
            },
            {random_tensor({4, 6}, rng)}) < 1e-6);
  CHECK(checked(
            [&](Graph<double>& g, std::span<const Var<double>> p) {
              return sum(mul(rms_norm(p[0], p[1], 1e-6), g.constant(w)));
            },
            {random_tensor({4, 6}, rng), random_tensor({6}, rng)}) < 1e-6);
  CHECK(checked(
            [&](Graph<double>& g, std::span<const Var<double>> p) { return sum(mul(gelu(p[0]), g.constant(w))); },
            {random_tensor({4, 6}, rng)}) < 1e-6);
  CHECK(checked(
            [&](Graph<double>& g, std::span<const Var<double>> p) {
              return sum(mul(add(scale(p[0], 3.0), p[1]), g.constant(w)));
            },
            {random_tensor({4, 6}, rng), random_tensor({4, 6}, rng)}) < 1e-6);
  const std::vector<int> ids = {3, 0, 3, 1};
  CHECK(checked(
            [&](Graph<double>& g, std::span<const Var<double>> p) {
              return sum(mul(embedding(p[0], std::span<const int>(ids)), g.constant(w)));
            },
            {random_tensor({5, 6}, rng)}) < 1e-6);
  const std::vector<int> targets = {2, 0, 5, 1};
  CHECK(checked(
            [&](Graph<double>&, std::span<const Var<double>> p) {
              return cross_entropy(p[0], std::span<const int>(targets), 0);
            },
            {random_tensor({4, 6}, rng)}) < 1e-6);
  CHECK(checked(
            [&](Graph<double>& g, std::span<const Var<double>> p) {
              const std::vector<Var<double>> parts = {p[0], p[1]};
              return sum(mul(concat_rows(std::span<const Var<double>>(parts)), g.constant(w)));
            },
            {random_tensor({1, 6}, rng), random_tensor({3, 6}, rng)}) < 1e-6);
}

TEST_CASE("attention gradient with mask and bias") {
  Rng rng(4);
  const auto buckets = std::make_shared<std::vector<int>>();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) buckets->push_back((j - i + 4) % 5);
  }
  const auto w = random_tensor({3, 8}, rng);
  for (bool causal : {false, true}) {
    const Objective f = [&](Graph<double>& g, std::span<const Var<double>> p) {
      AttentionMask mask{{1, 1, 0, 1}, causal};
      std::optional<PositionBias<double>> bias = PositionBias<double>{p[3], buckets};
      return sum(mul(attention(p[0], p[1], p[2], 2, mask, bias), g.constant(w)));
    };
    CHECK(checked(f, {random_tensor({3, 8}, rng), random_tensor({4, 8}, rng), random_tensor({4, 8}, rng),
                      random_tensor({2, 5}, rng)}) < 1e-6);
  }
}

TEST_CASE("dropout") {
  Graph<float> g;
  Rng rng(9);
  const auto x = g.constant(Tensor<float>({100, 100}, 1.0f));
  CHECK(dropout(x, 0.0, rng).id == x.id);
  const auto y = dropout(x, 0.5, rng).value();
  std::size_t zeros = 0;
  for (float v : y.values()) {
    CHECK((v == 0.0f || v == 2.0f));
    zeros += v == 0.0f;
  }
  CHECK(zeros > 4500);
  CHECK(zeros < 5500);
}

TEST_CASE("backward visits shared nodes once") {
  Graph<double> g;
  const auto x = g.parameter(Tensor<double>({1}, {3.0}));
  const auto y = mul(x, x);
  const auto z = add(y, y);
  g.backward(sum(z));
  CHECK(g.grad(x)[0] == doctest::Approx(12.0));
  g.backward(sum(y));
  CHECK(g.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("embedding rejects unknown ids") {
  Graph<float> g;
  const auto table = g.parameter(Tensor<float>({4, 2}));
  const std::vector<int> bad = {4};
  CHECK_THROWS_AS(embedding(table, std::span<const int>(bad)), RangeError);
}
