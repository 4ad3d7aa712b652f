#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mtinet/errors.hpp"
#include "mtinet/gradcheck.hpp"
#include "mtinet/model.hpp"
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

// Narrow network on the default 32x32 geometry; keeps finite differences cheap.
ModelConfig small_config() {
  ModelConfig c;
  c.encoder_channels = {2, 3, 3, 4};
  c.decoder_channels = {3, 3, 2, 2};
  c.head_dim = 4;
  c.disc_dim = 4;
  c.disc_head_dim = 4;
  return c;
}

Tensor random_phases(Rng& rng, std::size_t size = 32) { return oracle::random_tensor({4, size, size}, rng, 0, 255); }

std::vector<Var> random_maps(Rng& rng, std::size_t c, std::size_t p, bool grad = false) {
  std::vector<Var> maps;
  for (int i = 0; i < 4; ++i) maps.emplace_back(oracle::random_tensor({c, p, p}, rng), grad);
  return maps;
}

void zero_biases(ParameterSet& ps) {
  for (auto& [name, v] : ps.parameters()) {
    const bool is_bias = name.ends_with("bias") || name.ends_with("beta");
    if (is_bias) v.value_mut().fill(0.0);
  }
}

}  // namespace

TEST_CASE("model configuration checks") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.patch() == 2);
  CHECK(c.token_dim() == 4);
  CHECK(c.token_count() == 256);

  ModelConfig bad = c;
  bad.height = 48;
  bad.width = 48;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.width = 64;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.depth = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.encoder_channels = {8, 16, 32};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.use_spa = bad.use_spe = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.task_seg = bad.task_reg = bad.task_cls = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.high_pass.cutoff_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter bookkeeping") {
  Generator full(ModelConfig{}, 1);
  CHECK(full.params().contains("enc.spa.block0.conv.weight"));
  CHECK(full.params().contains("enc.spe.block3.bn.gamma"));
  CHECK(full.params().at("enc.spa.block3.conv.weight").shape() == Shape{64, 32, 3, 3});
  CHECK(full.params().at("dec.block0.deconv.weight").shape() == Shape{256, 64, 4, 4});
  CHECK(full.params().at("head.reg.weight").shape() == Shape{4, 4});

  ModelConfig shared;
  shared.share_branch_weights = true;
  Generator g(shared, 1);
  CHECK_FALSE(g.params().contains("enc.spe.block0.conv.weight"));
  CHECK(&g.encoder(Branch::spatial) == &g.encoder(Branch::spectral));

  ModelConfig seg_only;
  seg_only.task_reg = seg_only.task_cls = false;
  Generator s(seg_only, 1);
  CHECK_FALSE(s.params().contains("head.reg.weight"));
  CHECK(s.trunk().empty());
  CHECK_THROWS_AS(trunk_and_heads(s, Var(Tensor::zeros({256, 4}))), ContractError);

  ModelConfig cls_only;
  cls_only.task_seg = cls_only.task_reg = false;
  Generator c(cls_only, 1);
  CHECK_FALSE(c.params().contains("dec.head.weight"));
  CHECK(c.params().contains("head.cls.weight"));
  CHECK_THROWS_AS(segment(c, std::vector<Var>(4, Var(Tensor::zeros({64, 2, 2}))), true), ContractError);
}

TEST_CASE("encode_phase contracts") {
  Generator g(ModelConfig{}, 3);
  Rng rng(4);
  const Tensor img = oracle::random_tensor({32, 32}, rng);
  for (Branch b : {Branch::spatial, Branch::spectral}) {
    CHECK(encode_phase(g, img, b, true).shape() == Shape{64, 2, 2});
    CHECK(encode_phase(g, img, b, false).shape() == Shape{64, 2, 2});
  }
  const Var zero = encode_phase(g, Tensor({32, 32}, 0.0), Branch::spatial, true);
  for (double v : zero.value().values()) CHECK(v == 0.0);

  // The two branches have their own weights.
  const Tensor a = encode_phase(g, img, Branch::spatial, false).value();
  const Tensor b = encode_phase(g, img, Branch::spectral, false).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  CHECK(diff > 1e-6);

  CHECK_THROWS_AS(encode_phase(g, Tensor({30, 30}, 0.0), Branch::spatial, true), ShapeError);
}

TEST_CASE("grouped conv_block matches the pooled-statistics oracle") {
  Rng rng(21);
  ParameterSet ps;
  ConvBlock cb = make_conv_block(ps, "c", 2, 3, rng);
  cb.norm.gamma.value_mut() = oracle::random_tensor({3}, rng, 0.5, 1.5);
  cb.norm.beta.value_mut() = oracle::random_tensor({3}, rng);
  const std::size_t groups = 4;
  Tensor x = oracle::random_tensor({groups * 2, 6, 4}, rng);

  // Oracle: convolve each image, normalize channel c over all images, relu, pool.
  Tensor conv = Tensor::zeros({groups * 3, 6, 4});
  for (std::size_t g = 0; g < groups; ++g) {
    Tensor xi = Tensor::zeros({2, 6, 4});
    std::copy(x.data() + g * 48, x.data() + (g + 1) * 48, xi.data());
    const Tensor yi = oracle::conv2d(xi, cb.weight.value(), cb.bias.value(), 1);
    std::copy(yi.data(), yi.data() + yi.size(), conv.data() + g * yi.size());
  }
  const Tensor expected =
      oracle::max_pool2x2(oracle::relu(oracle::batch_norm_train_grouped(conv, cb.norm.gamma.value(), cb.norm.beta.value(), groups)));
  const Tensor got = conv_block(cb, Var(x), true, groups).value();
  REQUIRE(got.shape() == expected.shape());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-12));

  // Running statistics follow the pooled batch moments.
  const std::size_t n = 4 * 6 * 4;
  for (std::size_t c = 0; c < 3; ++c) {
    double mu = 0.0;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < 24; ++i) mu += conv[(g * 3 + c) * 24 + i];
    mu /= static_cast<double>(n);
    CHECK(cb.norm.running_mean.value()[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
  }

  CHECK_THROWS_AS(conv_block(cb, Var(Tensor::zeros({7, 6, 4})), true, groups), ShapeError);

  Var xp = param(x);
  Var mix(oracle::random_tensor({groups * 3, 3, 2}, rng));
  for (bool training : {true, false})
    require_gradcheck([&] { return ops::sum(ops::mul(conv_block(cb, xp, training, groups), mix)); },
                      {xp, cb.weight, cb.norm.gamma, cb.norm.beta}, 31);
}

TEST_CASE("frozen statistics use the batch without touching running averages") {
  Rng rng(22);
  ParameterSet ps;
  BatchNorm2d bn = make_batch_norm(ps, "bn", 2);
  const Tensor x = oracle::random_tensor({2, 4, 4}, rng, 1.0, 3.0);
  Tensor frozen_out;
  {
    FrozenStatsGuard guard;
    frozen_out = bn(Var(x), true).value();
  }
  for (double v : bn.running_mean.value().values()) CHECK(v == 0.0);
  for (double v : bn.running_var.value().values()) CHECK(v == 1.0);
  const Tensor live = bn(Var(x), true).value();
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(frozen_out[i] == live[i]);
  CHECK(bn.running_mean.value()[0] != 0.0);
}

TEST_CASE("encoder gradients through four stacked blocks") {
  Generator g(small_config(), 5);
  Rng rng(6);
  const Tensor img = oracle::random_tensor({32, 32}, rng);
  const Tensor mix = oracle::random_tensor({4, 2, 2}, rng);
  const auto& enc = g.encoder(Branch::spatial);
  for (bool training : {true, false}) {
    require_gradcheck([&] { return ops::sum(ops::mul(encode_phase(g, img, Branch::spatial, training), Var(mix))); },
                      {enc[0].weight, enc[1].norm.gamma, enc[2].weight, enc[3].norm.beta}, 9);
  }
  std::array<Tensor, 4> imgs;
  for (Tensor& t : imgs) t = oracle::random_tensor({32, 32}, rng);
  require_gradcheck(
      [&] {
        const auto maps = encode_phases(g, imgs, Branch::spatial, true);
        Var acc = ops::sum(ops::mul(maps[0], Var(mix)));
        for (std::size_t p = 1; p < 4; ++p) acc = ops::add(acc, ops::scale(ops::sum(ops::mul(maps[p], Var(mix))), p + 1.0));
        return acc;
      },
      {enc[0].weight, enc[2].norm.gamma, enc[3].weight}, 10);
}

TEST_CASE("encode_phases pools batch statistics over the phases") {
  Generator g(ModelConfig{}, 8);
  Rng rng(9);
  std::array<Tensor, 4> imgs;
  for (Tensor& t : imgs) t = oracle::random_tensor({32, 32}, rng);
  const auto pooled = encode_phases(g, imgs, Branch::spatial, true);
  REQUIRE(pooled.size() == 4);
  for (const Var& m : pooled) CHECK(m.shape() == Shape{64, 2, 2});
  // Four identical phases make the pooled batch equal to a single image.
  std::array<Tensor, 4> same{imgs[0], imgs[0], imgs[0], imgs[0]};
  const auto rep = encode_phases(g, same, Branch::spatial, true);
  const Tensor single = encode_phase(g, imgs[0], Branch::spatial, true).value();
  for (const Var& m : rep)
    for (std::size_t i = 0; i < single.size(); ++i) CHECK(m.value()[i] == doctest::Approx(single[i]).epsilon(1e-9));
}

TEST_CASE("mdief fusion examples and invariants") {
  Rng rng(11);
  const Tensor x = oracle::random_tensor({3, 2, 2}, rng);
  FusionWeights w;
  const Tensor same = mdief_fuse(Var(x), Var(x), &w).value();
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(w.gamma_spa[c] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(w.gamma_spe[c] == doctest::Approx(0.5).epsilon(1e-15));
  }
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(same[i] == doctest::Approx(3.0 * x[i]).epsilon(1e-12));

  // GAP(x_spa) = ln 3 and GAP(x_spe) = 0 on one channel.
  Tensor spa({1, 2, 2}, std::log(3.0));
  Tensor spe({1, 2, 2}, 0.0);
  spe.at(0, 0, 0) = 1.0;
  spe.at(0, 1, 1) = -1.0;
  const Tensor fused = mdief_fuse(Var(spa), Var(spe), &w).value();
  CHECK(w.gamma_spa[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(w.gamma_spe[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(fused.at(0, 0, 0) == doctest::Approx(std::log(3.0) * 1.75 + 1.25).epsilon(1e-12));

  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = oracle::random_tensor({4, 3, 3}, rng, -5, 5);
    const Tensor b = oracle::random_tensor({4, 3, 3}, rng, -5, 5);
    const Tensor out = mdief_fuse(Var(a), Var(b), &w).value();
    double bound = 0.0, amax = 0.0, bmax = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      amax = std::max(amax, std::abs(a[i]));
      bmax = std::max(bmax, std::abs(b[i]));
    }
    for (double v : out.values()) bound = std::max(bound, std::abs(v));
    CHECK(bound <= 2.0 * (amax + bmax));
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(std::abs(w.gamma_spa[c] + w.gamma_spe[c] - 1.0) <= 1e-12);
      CHECK(w.gamma_spa[c] > 0.0);
      CHECK(w.gamma_spa[c] < 1.0);
    }
    // Adding one constant to both branches shifts both GAP values alike.
    Tensor a2 = a, b2 = b;
    for (double& v : a2.values()) v += 2.5;
    for (double& v : b2.values()) v += 2.5;
    FusionWeights w2;
    mdief_fuse(Var(a2), Var(b2), &w2);
    for (std::size_t c = 0; c < 4; ++c) CHECK(w2.gamma_spa[c] == doctest::Approx(w.gamma_spa[c]).epsilon(1e-12));
  }

  CHECK_THROWS_AS(mdief_fuse(Var(Tensor::zeros({3, 2, 2})), Var(Tensor::zeros({2, 2, 2}))), ShapeError);

  Var pa = param(oracle::random_tensor({3, 2, 2}, rng));
  Var pb = param(oracle::random_tensor({3, 2, 2}, rng));
  const Var mix(oracle::random_tensor({3, 2, 2}, rng));
  require_gradcheck([&] { return ops::sum(ops::mul(mdief_fuse(pa, pb), mix)); }, {pa, pb}, 12);
}

TEST_CASE("segmentation decoder contracts") {
  Generator g(ModelConfig{}, 13);
  Rng rng(14);
  const auto maps = random_maps(rng, 64, 2);
  CHECK(segment(g, maps, true).shape() == Shape{32, 32});

  std::vector<Var> zeros(4, Var(Tensor::zeros({64, 2, 2})));
  const Var logits = segment(g, zeros, true);
  for (double v : logits.value().values()) CHECK(v == 0.0);
  const Var prob = ops::sigmoid(logits);
  for (double v : prob.value().values()) CHECK(v == 0.5);

  CHECK_THROWS_AS(segment(g, std::vector<Var>(3, Var(Tensor::zeros({64, 2, 2}))), true), ShapeError);

  Generator small(small_config(), 15);
  auto inputs = random_maps(rng, 4, 2, true);
  const Var mix(oracle::random_tensor({32, 32}, rng));
  for (bool training : {true, false}) {
    require_gradcheck([&] { return ops::sum(ops::mul(ops::sigmoid(segment(small, inputs, training)), mix)); },
                      {inputs[0], inputs[3], small.decoder()[0].weight, small.decoder()[2].norm.gamma,
                       small.decoder()[3].norm.beta, small.head_weight(), small.head_bias()},
                      16);
  }
}

TEST_CASE("token construction") {
  Rng rng(17);
  const auto maps = random_maps(rng, 64, 2);
  const Tensor tokens = build_tokens(maps).value();
  REQUIRE(tokens.shape() == Shape{256, 4});
  const Tensor pe = positional_encoding(256, 4);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t k = 0; k < 64; ++k)
      for (std::size_t t = 0; t < 4; ++t)
        CHECK(tokens.at(j * 64 + k, t) == maps[j].value()[k * 4 + t] + pe.at(j * 64 + k, t));

  std::vector<Var> swapped{maps[1], maps[0], maps[2], maps[3]};
  const Tensor other = build_tokens(swapped).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < other.size(); ++i) diff += std::abs(other[i] - tokens[i]);
  CHECK(diff > 1e-6);

  // Equal maps still give distinct tokens per phase through the encoding.
  std::vector<Var> equal(4, maps[0]);
  const Tensor eq = build_tokens(equal).value();
  CHECK(eq.at(0, 0) != eq.at(64, 0));

  CHECK_THROWS_AS(build_tokens(std::vector<Var>(4, Var(Tensor::zeros({8, 1, 1})))), ConfigError);
  CHECK_THROWS_AS(build_tokens(std::vector<Var>(4, Var(Tensor::zeros({8, 1, 3})))), ConfigError);
  CHECK_THROWS(build_tokens(std::vector<Var>(3, Var(Tensor::zeros({8, 2, 2})))));
}

TEST_CASE("trunk and heads") {
  Generator g(ModelConfig{}, 18);
  Rng rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    const HeadOutputs h = trunk_and_heads(g, Var(oracle::random_tensor({256, 4}, rng, -2, 2)));
    CHECK(h.reg.shape() == Shape{4});
    REQUIRE(h.cls_prob.shape() == Shape{2});
    CHECK(std::abs(h.cls_prob.value()[0] + h.cls_prob.value()[1] - 1.0) <= 1e-12);
  }
  std::vector<AttentionTrace> traces;
  trunk_and_heads(g, Var(oracle::random_tensor({256, 4}, rng)), &traces);
  CHECK(traces.size() == 3);

  Generator zeroed(ModelConfig{}, 18);
  zero_biases(zeroed.params());
  const HeadOutputs z = trunk_and_heads(zeroed, Var(Tensor::zeros({256, 4})));
  for (double v : z.reg.value().values()) CHECK(v == 0.0);

  Generator small(small_config(), 20);
  Var tokens = param(oracle::random_tensor({16, 4}, rng));
  const Tensor a = oracle::random_tensor({4}, rng), b = oracle::random_tensor({2}, rng);
  const auto& t = small.trunk();
  require_gradcheck(
      [&] {
        const HeadOutputs h = trunk_and_heads(small, tokens);
        return ops::add(ops::sum(ops::mul(ops::scale(h.reg, 1.0 / 255.0), Var(a))), ops::sum(ops::mul(h.cls_prob, Var(b))));
      },
      {tokens, t[0].heads[0].query, t[1].ff1.weight, t[2].norm2.gamma, t[2].heads[0].output, small.reg_head().weight,
       small.reg_head().bias, small.cls_head().weight},
      21);
}

TEST_CASE("temporal interaction module") {
  Rng rng(23);
  const Tensor phases = random_phases(rng);
  const Tensor ones = tim_derive(Var(Tensor({32, 32}, 1.0)), phases).value();
  for (std::size_t p = 0; p < 4; ++p) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 1024; ++i) mean += phases[p * 1024 + i];
    mean /= 1024.0;
    CHECK(ones[p] == doctest::Approx(mean).epsilon(1e-8));
  }

  phantom::PhantomConfig pc;
  pc.noise_sigma = 0.0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const phantom::Sample s = phantom::generate_sample(seed, static_cast<int>(seed % 2), pc);
    const Tensor derived = tim_derive(Var(s.mask), s.phases).value();
    for (std::size_t p = 0; p < 4; ++p) CHECK(std::abs(derived[p] - s.enhancement[p]) <= 1e-9);
  }

  const Tensor soft = oracle::random_tensor({32, 32}, rng, 0.05, 0.95);
  Tensor scaled = soft;
  for (double& v : scaled.values()) v *= 0.3;
  const Tensor r1 = tim_derive(Var(soft), phases).value();
  const Tensor r2 = tim_derive(Var(scaled), phases).value();
  for (std::size_t p = 0; p < 4; ++p) CHECK(r1[p] == doctest::Approx(r2[p]).epsilon(1e-12));

  // Below the eps floor the mass is held at eps.
  Tensor tiny = Tensor::zeros({32, 32});
  tiny[5] = 4e-7;
  const Tensor t = tim_derive(Var(tiny), phases).value();
  for (std::size_t p = 0; p < 4; ++p) CHECK(t[p] == doctest::Approx(0.4 * phases[p * 1024 + 5]).epsilon(1e-12));

  const Tensor empty = tim_derive(Var(Tensor::zeros({32, 32})), phases).value();
  for (double v : empty.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(tim_derive(Var(Tensor::zeros({16, 16})), phases), ShapeError);

  Var sp = param(soft);
  const Tensor mix = oracle::random_tensor({4}, rng);
  require_gradcheck([&] { return ops::sum(ops::mul(tim_derive(sp, phases), Var(mix))); }, {sp}, 24);
}

TEST_CASE("temporal dynamic discriminator") {
  ModelConfig cfg;
  Discriminator d(cfg, 25);
  Rng rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    const double p = tdd_discriminate(d, Var(oracle::random_tensor({6}, rng, 0, 1))).item();
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
  const Tensor y = Tensor::vector({0.2, 0.5, 0.8, 0.95, 1.0, 0.0});
  const Tensor y_perm = Tensor::vector({0.95, 0.8, 0.5, 0.2, 1.0, 0.0});
  CHECK(tdd_discriminate(d, Var(y)).item() != tdd_discriminate(d, Var(y_perm)).item());

  Tensor bad = y;
  bad[2] = std::nan("");
  CHECK_THROWS_AS(tdd_discriminate(d, Var(bad)), ContractError);
  CHECK_THROWS_AS(tdd_discriminate(d, Var(Tensor::zeros({5}))), ShapeError);

  Var yp = param(oracle::random_tensor({6}, rng, 0, 1));
  require_gradcheck([&] { return tdd_discriminate(d, yp); },
                    {yp, d.embed_weight(), d.embed_bias(), d.block().heads[0].key, d.block().ff2.weight, d.out().weight},
                    27);
}

TEST_CASE("discriminator pairs") {
  const Tensor enh = Tensor::vector({51.0, 102.0, 204.0, 255.0});
  const Tensor real = real_pair(enh, 1).value();
  const std::vector<double> expect{0.2, 0.4, 0.8, 1.0, 0.0, 1.0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(real[i] == doctest::Approx(expect[i]).epsilon(1e-15));
  CHECK_THROWS_AS(real_pair(enh, 2), ContractError);

  const Tensor fake = fake_pair(Var(enh), Var(Tensor::vector({0.3, 0.7}))).value();
  CHECK(fake[1] == doctest::Approx(0.4));
  CHECK(fake[5] == doctest::Approx(0.7));
}

TEST_CASE("forward pass composition and switches") {
  Rng rng(28);
  const Tensor phases = random_phases(rng);
  {
    Generator g(ModelConfig{}, 29);
    const PreparedInput in = prepare_input(phases, g.config());
    const ForwardResult r = forward(g, in, true);
    CHECK(r.seg_prob.shape() == Shape{32, 32});
    CHECK(r.reg.shape() == Shape{4});
    CHECK(r.cls_prob.shape() == Shape{2});
    CHECK(r.tim.shape() == Shape{4});
    CHECK(r.fusion.size() == 4);
    for (double v : r.seg_prob.value().values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    CHECK(std::abs(r.cls_prob.value()[0] + r.cls_prob.value()[1] - 1.0) <= 1e-12);
    CHECK_THROWS_AS(prepare_input(Tensor::zeros({4, 16, 16}), g.config()), ShapeError);
  }

  // Shared weights and identical branch inputs give x_spa == x_spe == X.
  ModelConfig shared;
  shared.share_branch_weights = true;
  Generator g(shared, 30);
  PreparedInput in = prepare_input(phases, shared);
  in.spectral = in.spatial;
  const ForwardResult with = forward(g, in, false);
  const Tensor x = encode_phases(g, in.spatial, Branch::spatial, true)[0].value();
  ModelConfig plain = shared;
  plain.use_mdief = false;
  Generator gp(plain, 30);
  const ForwardResult without = forward(gp, in, false);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(with.fused[0].value()[i] == doctest::Approx(3.0 * x[i]).epsilon(1e-9));
    CHECK(without.fused[0].value()[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-9));
  }
  CHECK(without.fusion.empty());

  // A single branch keeps weight (1, 0).
  ModelConfig spa_only;
  spa_only.use_spe = false;
  Generator gs(spa_only, 30);
  const ForwardResult one = forward(gs, in, false);
  const Tensor xs = encode_phases(gs, in.spatial, Branch::spatial, true)[0].value();
  for (std::size_t i = 0; i < xs.size(); ++i) CHECK(one.fused[0].value()[i] == doctest::Approx(2.0 * xs[i]).epsilon(1e-9));

  ModelConfig seg_only;
  seg_only.task_reg = seg_only.task_cls = false;
  Generator gso(seg_only, 31);
  const ForwardResult so = forward(gso, prepare_input(phases, seg_only), true);
  CHECK(so.seg_prob.defined());
  CHECK_FALSE(so.reg.defined());
  CHECK_FALSE(so.cls_prob.defined());
  CHECK_FALSE(so.tim.defined());

  ModelConfig no_tim;
  no_tim.use_tim = false;
  Generator gnt(no_tim, 31);
  CHECK_FALSE(forward(gnt, prepare_input(phases, no_tim), true).tim.defined());
}

TEST_CASE("inference normalization modes") {
  Rng rng(32);
  const Tensor phases = random_phases(rng);
  ModelConfig cfg;
  Generator g(cfg, 33);
  const PreparedInput in = prepare_input(phases, cfg);
  const Tensor before = g.params().buffers().at("enc.spa.block0.bn.running_mean").value();
  const Tensor a = forward(g, in, false).reg.value();
  const Tensor b = forward(g, in, false).reg.value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
  const Tensor after = g.params().buffers().at("enc.spa.block0.bn.running_mean").value();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);

  ModelConfig running = cfg;
  running.eval_batch_stats = false;
  Generator gr(running, 33);
  const Tensor c = forward(gr, in, false).reg.value();
  double diff = 0.0;
  for (std::size_t i = 0; i < 4; ++i) diff += std::abs(a[i] - c[i]);
  CHECK(diff > 1e-9);
}

TEST_CASE("every output is differentiable with respect to the parameters") {
  Rng rng(34);
  const Tensor phases = random_phases(rng);
  const ModelConfig cfg = small_config();
  Generator g(cfg, 35);
  const PreparedInput in = prepare_input(phases, cfg);
  const Tensor ms = oracle::random_tensor({32, 32}, rng), mr = oracle::random_tensor({4}, rng);
  const Tensor mc = oracle::random_tensor({2}, rng), mt = oracle::random_tensor({4}, rng);
  auto objective = [&] {
    const ForwardResult r = forward(g, in, true);
    Var total = ops::sum(ops::mul(r.seg_prob, Var(ms)));
    total = ops::add(total, ops::sum(ops::mul(ops::scale(r.reg, 1.0 / 255.0), Var(mr))));
    total = ops::add(total, ops::sum(ops::mul(r.cls_prob, Var(mc))));
    return ops::add(total, ops::sum(ops::mul(ops::scale(r.tim, 1.0 / 255.0), Var(mt))));
  };
  auto& p = g.params();
  require_gradcheck(objective,
                    {p.at("enc.spa.block0.conv.weight"), p.at("enc.spe.block1.bn.gamma"), p.at("enc.spe.block3.bn.beta"),
                     p.at("dec.block1.deconv.weight"), p.at("dec.head.weight"), p.at("trunk.block0.ff1.weight"),
                     p.at("head.reg.weight"), p.at("head.cls.bias")},
                    36);

  // Every parameter is reached by the full objective.
  backward(objective(), p);
  for (const auto& [name, v] : p.parameters()) {
    INFO(name);
    CHECK(v.grad().size() == v.size());
  }
}
