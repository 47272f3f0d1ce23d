#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "pivad/nn.hpp"
#include "pivad/rng.hpp"
#include "pivad/tensor.hpp"

using namespace pivad;

TEST_CASE("xavier init is seeded and bounded", "[nn]") {
  Linear a("lin", 4, 4), b("lin", 4, 4), c("lin", 4, 4);
  a.init(11);
  b.init(11);
  c.init(12);
  REQUIRE(a.weight.value == b.weight.value);
  REQUIRE(a.weight.value != c.weight.value);
  double bound = std::sqrt(6.0 / 8.0);
  for (double v : a.weight.value) {
    REQUIRE(v <= bound);
    REQUIRE(v >= -bound);
  }
  REQUIRE(std::all_of(a.bias.value.begin(), a.bias.value.end(), [](double v) { return v == 0.0; }));
  REQUIRE_THROWS_AS(Linear("bad", 0, 4), std::invalid_argument);
}

TEST_CASE("linear forward matches manual matmul", "[nn]") {
  Linear lin("lin", 2, 3);
  lin.weight.value = {1, 2, 3, 4, 5, 6};
  lin.bias.value = {10, 20, 30};
  Graph g;
  Binder b(g);
  Tensor y = lin.forward(b, g.input({1, 2}, {1, 1}));
  REQUIRE(y.values() == std::vector<double>{15, 27, 39});
}

TEST_CASE("transformer block with zero output projections is identity", "[nn]") {
  TransformerBlock blk("blk", 8, 2);
  blk.init(5);
  // zero the attention output projection and the second FFN layer
  std::fill(blk.o.weight.value.begin(), blk.o.weight.value.end(), 0.0);
  std::fill(blk.ff2.weight.value.begin(), blk.ff2.weight.value.end(), 0.0);
  Graph g;
  Binder b(g);
  Rng rng(3);
  std::vector<double> xv(4 * 8);
  for (double& v : xv) v = rng.normal();
  Tensor y = blk.forward(b, g.input({4, 8}, xv));
  REQUIRE(y.values() == xv);
}

TEST_CASE("transformer block handles T=1", "[nn]") {
  TransformerBlock blk("blk", 8, 4);
  blk.init(7);
  Graph g;
  Binder b(g);
  Rng rng(9);
  std::vector<double> xv(8);
  for (double& v : xv) v = rng.normal();
  Tensor y = blk.forward(b, g.input({1, 8}, xv));
  for (double v : y.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("transformer block is permutation-equivariant", "[nn]") {
  TransformerBlock blk("blk", 8, 2);
  blk.init(21);
  Rng rng(4);
  int t = 5, d = 8;
  std::vector<double> xv(t * d);
  for (double& v : xv) v = rng.normal();
  std::vector<int> perm = {3, 0, 4, 1, 2};
  std::vector<double> xp(t * d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) xp[i * d + j] = xv[perm[i] * d + j];

  Graph g1, g2;
  Binder b1(g1), b2(g2);
  Tensor y1 = blk.forward(b1, g1.input({t, d}, xv));
  Tensor y2 = blk.forward(b2, g2.input({t, d}, xp));
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j)
      REQUIRE(y2.values()[i * d + j] == Catch::Approx(y1.values()[perm[i] * d + j]).margin(1e-12));
}

TEST_CASE("transformer block output finite for large inputs", "[nn]") {
  TransformerBlock blk("blk", 8, 2);
  blk.init(2);
  Graph g;
  Binder b(g);
  Rng rng(8);
  std::vector<double> xv(6 * 8);
  for (double& v : xv) v = rng.uniform(-1e3, 1e3);
  Tensor y = blk.forward(b, g.input({6, 8}, xv));
  for (double v : y.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("transformer block gradient check", "[nn][gradsuite]") {
  TransformerBlock blk("blk", 8, 2);
  blk.init(31);
  Rng rng(13);
  std::vector<double> xv(4 * 8);
  for (double& v : xv) v = rng.normal();
  std::vector<Param*> params;
  blk.collect(params);
  auto f = [&](Graph& g) {
    Binder b(g);
    return mean_all(blk.forward(b, g.input({4, 8}, xv)));
  };
  auto report = grad_check(f, params, 1e-5, 1e-4);
  INFO("max rel err " << report.max_rel_error);
  REQUIRE(report.pass);
}

TEST_CASE("dim not divisible by heads is rejected", "[nn]") {
  REQUIRE_THROWS_WITH(TransformerBlock("bad", 6, 4), Catch::Matchers::ContainsSubstring("divisible"));
}

TEST_CASE("frozen binder blocks gradients", "[nn]") {
  Linear lin("lin", 3, 3);
  lin.init(17);
  Graph g;
  Binder frozen(g, /*trainable=*/false);
  Tensor y = mean_all(lin.forward(frozen, g.input({2, 3}, {1, 2, 3, 4, 5, 6})));
  g.backward(y);
  REQUIRE(std::all_of(lin.weight.grad.begin(), lin.weight.grad.end(), [](double v) { return v == 0.0; }));
}
