#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "mtinet/errors.hpp"
#include "mtinet/gradcheck.hpp"
#include "mtinet/kernels.hpp"
#include "mtinet/layers.hpp"
#include "mtinet/optim.hpp"
#include "oracles.hpp"

using namespace mtinet;

namespace {

Var param(Tensor t) { return Var(std::move(t), true); }

void require_gradcheck(const std::function<Var()>& f, std::vector<Var> inputs, std::uint64_t seed = 7) {
  GradCheckOptions opt;
  opt.seed = seed;
  GradCheckResult r = check_gradients(f, inputs, opt);
  INFO("max rel error " << r.max_rel_error << " at " << r.worst << ", kinks " << r.kinks);
  CHECK(r.checked > 0);
  CHECK(r.passed(1e-4));
}

}  // namespace

TEST_CASE("tensor construction enforces size and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2}, std::vector<double>{1, NAN}), ContractError);
  CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
}

TEST_CASE("parallel kernels match the serial reference") {
  Rng rng(11);
  for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 13, 5}, {64, 300, 72}, {33, 17, 129}}) {
    Tensor a = oracle::random_tensor({m, k}, rng), b = oracle::random_tensor({k, n}, rng);
    Tensor bt = oracle::random_tensor({n, k}, rng), at = oracle::random_tensor({k, m}, rng);
    Tensor c1 = Tensor::zeros({m, n}), c2 = Tensor::zeros({m, n});
    kernels::gemm_nn(m, n, k, a.data(), b.data(), c1.data());
    kernels::serial::gemm_nn(m, n, k, a.data(), b.data(), c2.data());
    CHECK(max_abs_diff(c1, c2) < 1e-12);
    kernels::gemm_nt(m, n, k, a.data(), bt.data(), c1.data());
    kernels::serial::gemm_nt(m, n, k, a.data(), bt.data(), c2.data());
    CHECK(max_abs_diff(c1, c2) < 1e-12);
    kernels::gemm_tn(m, n, k, at.data(), b.data(), c1.data(), true);
    kernels::serial::gemm_tn(m, n, k, at.data(), b.data(), c2.data(), true);
    CHECK(max_abs_diff(c1, c2) < 1e-12);
  }
  for (kernels::WindowGeometry g : {kernels::WindowGeometry{3, 8, 6, 3, 1, 1}, kernels::WindowGeometry{2, 8, 8, 4, 2, 1},
                                    kernels::WindowGeometry{16, 32, 32, 3, 1, 1}}) {
    Tensor img = oracle::random_tensor({g.channels, g.height, g.width}, rng);
    std::vector<double> c1(g.col_rows() * g.col_cols()), c2(c1.size());
    kernels::im2col(g, img.data(), c1.data());
    kernels::serial::im2col(g, img.data(), c2.data());
    CHECK(c1 == c2);
    Tensor back1 = Tensor::zeros(img.shape()), back2 = Tensor::zeros(img.shape());
    kernels::col2im(g, c1.data(), back1.data());
    kernels::serial::col2im(g, c1.data(), back2.data());
    CHECK(max_abs_diff(back1, back2) < 1e-12);
  }
}

TEST_CASE("conv_block with identity kernel and neutral inference BN is a max-pool") {
  ParameterSet ps;
  Rng rng(1);
  ConvBlock block = make_conv_block(ps, "b", 1, 1, rng);
  block.weight.value_mut().fill(0.0);
  block.weight.value_mut()[4] = 1.0;  // centre tap
  Tensor x = oracle::random_tensor({1, 4, 4}, rng, 0.1, 2.0);
  Var y = conv_block(block, Var(x), /*training=*/false);
  Tensor expected = oracle::max_pool2x2(x);
  REQUIRE(y.shape() == Shape{1, 2, 2});
  // inference BN divides by sqrt(1 + 1e-5)
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.value()[i] == doctest::Approx(expected[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
}

TEST_CASE("conv_block on a constant image with a mean kernel pools back to the constant") {
  ParameterSet ps;
  Rng rng(2);
  ConvBlock block = make_conv_block(ps, "b", 1, 1, rng);
  block.weight.value_mut().fill(1.0 / 9.0);
  const double c = 3.25;
  Var pre = ops::conv2d(Var(Tensor({1, 8, 8}, c)), block.weight, block.bias, 1);
  for (std::size_t y = 1; y < 7; ++y)
    for (std::size_t x = 1; x < 7; ++x) CHECK(pre.value().at(0, y, x) == doctest::Approx(c).epsilon(1e-14));
  block.norm.running_var.value_mut().fill(1.0 - 1e-5);  // unit inference scale
  Var y = conv_block(block, Var(Tensor({1, 8, 8}, c)), false);
  for (double v : y.value().values()) CHECK(v == doctest::Approx(c).epsilon(1e-12));
}

TEST_CASE("conv_block matches the nested-loop oracle in training mode") {
  Rng rng(3);
  ParameterSet ps;
  ConvBlock block = make_conv_block(ps, "b", 2, 3, rng);
  block.norm.gamma.value_mut() = oracle::random_tensor({3}, rng, 0.5, 1.5);
  block.norm.beta.value_mut() = oracle::random_tensor({3}, rng);
  block.bias.value_mut() = oracle::random_tensor({3}, rng);
  Tensor x = oracle::random_tensor({2, 8, 8}, rng);
  Tensor expected = oracle::max_pool2x2(oracle::relu(oracle::batch_norm_train(
      oracle::conv2d(x, block.weight.value(), block.bias.value(), 1), block.norm.gamma.value(), block.norm.beta.value())));
  Var y = conv_block(block, Var(x), true);
  CHECK(max_abs_diff(y.value(), expected) < 1e-9);
}

TEST_CASE("conv_block shape errors") {
  Rng rng(4);
  ParameterSet ps;
  ConvBlock block = make_conv_block(ps, "b", 2, 3, rng);
  CHECK_THROWS_AS(conv_block(block, Var(Tensor({2, 5, 4})), true), ShapeError);
  CHECK_THROWS_AS(conv_block(block, Var(Tensor({3, 4, 4})), true), ShapeError);
}

TEST_CASE("deconv_block contracts") {
  Rng rng(5);
  ParameterSet ps;
  DeconvBlock block = make_deconv_block(ps, "d", 1, 1, rng);
  Var zero = deconv_block(block, Var(Tensor({1, 2, 2}, 0.0)), false);
  CHECK(zero.shape() == Shape{1, 4, 4});
  for (double v : zero.value().values()) CHECK(v == 0.0);

  // A single unit impulse stamps the kernel's interior footprint.
  Var w = param(oracle::random_tensor({1, 1, 4, 4}, rng));
  Var b = param(Tensor({1}, 0.0));
  Var y = ops::conv_transpose2d(Var(Tensor({1, 1, 1}, 1.0)), w, b, 2, 1);
  REQUIRE(y.shape() == Shape{1, 2, 2});
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) CHECK(y.value().at(0, oy, ox) == w.value()[(oy + 1) * 4 + ox + 1]);

  DeconvBlock wide = make_deconv_block(ps, "w", 3, 5, rng);
  CHECK(deconv_block(wide, Var(oracle::random_tensor({3, 3, 5}, rng)), true).shape() == Shape{5, 6, 10});
  CHECK_THROWS_AS(deconv_block(wide, Var(Tensor({2, 3, 5})), true), ShapeError);

  Tensor x = oracle::random_tensor({3, 4, 3}, rng);
  Var bias = param(oracle::random_tensor({5}, rng));
  Var out = ops::conv_transpose2d(Var(x), wide.weight, bias, 2, 1);
  CHECK(max_abs_diff(out.value(), oracle::conv_transpose2d(x, wide.weight.value(), bias.value(), 2, 1)) < 1e-12);
}

TEST_CASE("linear layer examples") {
  Var x(Tensor::vector({1, 2}));
  Var w(Tensor({2, 2}, std::vector<double>{1, 1, 0, 1}));
  Var b(Tensor::vector({0, 1}));
  Var y = ops::linear(x, w, b);
  CHECK(y.value()[0] == 3.0);
  CHECK(y.value()[1] == 3.0);
  Var eye(Tensor({2, 2}, std::vector<double>{1, 0, 0, 1}));
  CHECK(ops::linear(x, eye, Var(Tensor({2}, 0.0))).value() == x.value());
  CHECK_THROWS_AS(ops::linear(Var(Tensor({3}, 1.0)), w, b), ShapeError);

  Rng rng(6);
  Var wp = param(oracle::random_tensor({3, 4}, rng));
  Var bp = param(oracle::random_tensor({3}, rng));
  Var xp = param(oracle::random_tensor({4}, rng));
  require_gradcheck([&] { return ops::sum(ops::linear(xp, wp, bp)); }, {wp, bp, xp});
  // d sum(Wx + b) / dW_ij = x_j for every row
  backward(ops::sum(ops::linear(xp, wp, bp)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(wp.grad().at(i, j) == doctest::Approx(xp.value()[j]));
}

TEST_CASE("softmax examples and invariants") {
  Var half = softmax(Var(Tensor::vector({0, 0})));
  CHECK(half.value()[0] == doctest::Approx(0.5));
  Var q = softmax(Var(Tensor::vector({std::log(3.0), 0})));
  CHECK(std::abs(q.value()[0] - 0.75) < 1e-15);
  CHECK(std::abs(q.value()[1] - 0.25) < 1e-15);
  Var big = softmax(Var(Tensor::vector({1000, 0})));
  CHECK(big.value().all_finite());
  CHECK(big.value()[0] == doctest::Approx(1.0));
  CHECK(big.value()[1] < 1e-300);

  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = oracle::random_tensor({7}, rng, -20, 20);
    Tensor shifted = z;
    for (double& v : shifted.values()) v += 13.7;
    Var p = softmax(Var(z));
    Var ps = softmax(Var(shifted));
    CHECK(std::abs(mtinet::sum(p.value()) - 1.0) < 1e-12);
    CHECK(max_abs_diff(p.value(), ps.value()) < 1e-12);
    for (double v : p.value().values()) CHECK(v > 0.0);
  }
}

TEST_CASE("positional encoding") {
  Tensor pe = positional_encoding(3, 6);
  for (std::size_t j = 0; j < 6; ++j) CHECK(pe.at(0, j) == (j % 2 ? 1.0 : 0.0));
  Tensor pe4 = positional_encoding(2, 4);
  CHECK(pe4.at(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(pe4.at(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(pe4.at(1, 2) == doctest::Approx(std::sin(0.01)).epsilon(1e-15));
  CHECK(pe4.at(1, 3) == doctest::Approx(std::cos(0.01)).epsilon(1e-15));
  CHECK_THROWS_AS(positional_encoding(4, 5), ConfigError);

  Tensor table = positional_encoding(512, 4);
  std::set<std::vector<double>> rows;
  for (std::size_t p = 0; p < 512; ++p) {
    rows.insert(std::vector<double>(table.data() + p * 4, table.data() + p * 4 + 4));
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(table.at(p, j)) <= 1.0);
  }
  CHECK(rows.size() == 512);
}

TEST_CASE("transformer block attention contracts") {
  Rng rng(9);
  for (std::size_t head_dim : {64u, 2u}) {
    CAPTURE(head_dim);
    ParameterSet ps;
    TransformerConfig cfg{16, 2, head_dim, 32};
    TransformerBlock block = make_transformer_block(ps, "t", cfg, rng);
    block.output_bias.value_mut() = oracle::random_tensor({16}, rng);

    AttentionTrace single;
    transformer_block(block, Var(oracle::random_tensor({1, 16}, rng)), &single);
    for (const Tensor& w : single.weights) CHECK(w.item() == 1.0);

    Tensor same = Tensor::zeros({2, 16});
    Tensor row = oracle::random_tensor({16}, rng);
    for (std::size_t j = 0; j < 16; ++j) same.at(0, j) = same.at(1, j) = row[j];
    Var y = transformer_block(block, Var(same));
    for (std::size_t j = 0; j < 16; ++j) CHECK(y.value().at(0, j) == y.value().at(1, j));

    Tensor x = oracle::random_tensor({4, 16}, rng);
    AttentionTrace trace;
    Var attn = multi_head_attention(block, Var(x), &trace);
    REQUIRE(trace.weights.size() == 2);
    std::vector<std::vector<double>> expected(4, std::vector<double>(16, 0.0));
    for (std::size_t h = 0; h < 2; ++h) {
      const AttentionHead& hd = block.heads[h];
      auto ref = oracle::attention_head(x, hd.query.value(), hd.key.value(), hd.value.value(), hd.output.value());
      for (std::size_t i = 0; i < 4; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
          row_sum += trace.weights[h].at(i, j);
          CHECK(std::abs(trace.weights[h].at(i, j) - ref.weights[i][j]) < 1e-12);
        }
        CHECK(std::abs(row_sum - 1.0) < 1e-12);
        for (std::size_t c = 0; c < 16; ++c) expected[i][c] += ref.output[i][c];
      }
    }
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 16; ++c)
        CHECK(std::abs(attn.value().at(i, c) - expected[i][c] - block.output_bias.value()[c]) < 1e-12);

    // permutation equivariance without positional encoding
    Tensor perm = x;
    const std::array<std::size_t, 4> order{2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 16; ++c) perm.at(i, c) = x.at(order[i], c);
    Var a = transformer_block(block, Var(x));
    Var b = transformer_block(block, Var(perm));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(b.value().at(i, c) - a.value().at(order[i], c)) < 1e-12);
  }
  ParameterSet ps;
  CHECK_THROWS_AS(make_transformer_block(ps, "bad", TransformerConfig{6, 4, 8, 8}, rng), ConfigError);
}

TEST_CASE("backward basics") {
  Var x = param(Tensor({2, 3}, std::vector<double>{1, -2, 3, 0.5, 0, 7}));
  backward(ops::sum(x));
  for (double g : x.grad().values()) CHECK(g == 1.0);
  Var v = param(Tensor::vector({1, 2}));
  Var loss = ops::sum(ops::mul(v, v));
  backward(loss);
  CHECK(v.grad()[0] == 2.0);
  CHECK(v.grad()[1] == 4.0);
  backward(loss);  // second pass starts from zero, no accumulation
  CHECK(v.grad()[1] == 4.0);
  CHECK_THROWS_AS(backward(v), ContractError);

  ParameterSet ps;
  Var used = ps.add("used", Tensor::vector({1, 2}));
  Var unused = ps.add("unused", Tensor::vector({3}));
  backward(ops::sum(used), ps);
  CHECK(unused.grad().shape() == Shape{1});
  CHECK(unused.grad()[0] == 0.0);
}

TEST_CASE("layer primitives pass finite-difference checks") {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    CAPTURE(trial);
    const std::uint64_t seed = 100 + static_cast<std::uint64_t>(trial);
    Var x = param(oracle::random_tensor({2, 6, 4}, rng));
    Var w = param(oracle::random_tensor({3, 2, 3, 3}, rng));
    Var b = param(oracle::random_tensor({3}, rng));
    Var mix = Var(oracle::random_tensor({3, 6, 4}, rng));
    require_gradcheck([&] { return ops::sum(ops::mul(ops::conv2d(x, w, b, 1), mix)); }, {x, w, b}, seed);

    ParameterSet ps;
    ConvBlock cb = make_conv_block(ps, "c", 2, 3, rng);
    cb.norm.gamma.value_mut() = oracle::random_tensor({3}, rng, 0.5, 1.5);
    cb.norm.beta.value_mut() = oracle::random_tensor({3}, rng);
    Var cmix(oracle::random_tensor({3, 3, 2}, rng));
    for (bool training : {true, false}) {
      require_gradcheck([&] { return ops::sum(ops::mul(conv_block(cb, x, training), cmix)); },
                        {x, cb.weight, cb.norm.gamma, cb.norm.beta}, seed);
    }

    DeconvBlock db = make_deconv_block(ps, "d", 3, 2, rng);
    db.norm.beta.value_mut() = oracle::random_tensor({2}, rng);
    Var dx = param(oracle::random_tensor({3, 2, 3}, rng));
    Var dmix(oracle::random_tensor({2, 4, 6}, rng));
    require_gradcheck([&] { return ops::sum(ops::mul(deconv_block(db, dx, true), dmix)); },
                      {dx, db.weight, db.bias, db.norm.gamma, db.norm.beta}, seed);

    Var logits = param(oracle::random_tensor({5}, rng, -3, 3));
    Var target(oracle::random_tensor({5}, rng));
    require_gradcheck([&] { return ops::sum(ops::mul(softmax(logits), target)); }, {logits}, seed);

    TransformerBlock tb = make_transformer_block(ps, "t", TransformerConfig{4, 2, trial % 2 ? 64u : 2u, 8}, rng);
    Var tokens = param(oracle::random_tensor({5, 4}, rng));
    Var tmix(oracle::random_tensor({5, 4}, rng));
    std::vector<Var> inputs{tokens, tb.heads[0].query, tb.heads[1].key, tb.heads[0].value, tb.heads[1].output,
                            tb.ff1.weight, tb.ff2.bias, tb.norm1.gamma, tb.norm2.beta};
    require_gradcheck([&] { return ops::sum(ops::mul(transformer_block(tb, tokens), tmix)); }, inputs, seed);
  }
}

TEST_CASE("adam step") {
  ParameterSet ps;
  Var p = ps.add("p", Tensor::vector({0.5, -1.0, 2.0}));
  AdamState state;
  CHECK_THROWS_AS(adam_step(ps, state), ContractError);
  CHECK(state.step == 0);

  ps.zero_grad();
  adam_step(ps, state);
  CHECK(state.step == 1);
  CHECK(p.value() == Tensor::vector({0.5, -1.0, 2.0}));

  AdamState fresh;
  p.grad_mut() = Tensor::vector({3.0, -0.2, 1e-3});
  const Tensor before = p.value();
  adam_step(ps, fresh);
  for (std::size_t i = 0; i < 3; ++i) {
    const double delta = p.value()[i] - before[i];
    const double g = p.grad()[i];
    // m_hat / sqrt(v_hat) = g / |g| on the first step
    CHECK(delta == doctest::Approx(-1e-4 * g / (std::abs(g) + 1e-8)).epsilon(1e-9));
  }

  ParameterSet quad;
  Var theta = quad.add("theta", Tensor::vector({1.0}));
  AdamState qs;
  qs.options.learning_rate = 0.05;
  double previous = 1.0;
  for (int i = 0; i < 10; ++i) {
    Var f = ops::sum(ops::mul(theta, theta));
    backward(f, quad);
    adam_step(quad, qs);
    const double now = theta.value()[0] * theta.value()[0];
    CHECK(now < previous);
    previous = now;
  }
}

TEST_CASE("identical seeds give identical initialization") {
  auto build = [](std::uint64_t seed) {
    ParameterSet ps;
    Rng rng(seed);
    make_conv_block(ps, "a", 1, 4, rng);
    make_transformer_block(ps, "t", TransformerConfig{4, 1, 64, 16}, rng);
    std::vector<double> flat;
    for (const auto& [name, v] : ps.parameters()) flat.insert(flat.end(), v.value().values().begin(), v.value().values().end());
    return flat;
  };
  CHECK(build(42) == build(42));
  CHECK(build(42) != build(43));
}
