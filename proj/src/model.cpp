#include "mtinet/model.hpp"

#include <cmath>
#include <optional>

#include "mtinet/errors.hpp"
#include "mtinet/rng.hpp"

namespace mtinet {

namespace {

constexpr std::uint64_t kGeneratorStream = 1;
constexpr std::uint64_t kDiscriminatorStream = 2;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

std::vector<ConvBlock> make_encoder(ParameterSet& params, const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
  std::vector<ConvBlock> blocks;
  std::size_t in = 1;
  for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
    blocks.push_back(make_conv_block(params, prefix + ".block" + std::to_string(i), in, cfg.encoder_channels[i], rng));
    in = cfg.encoder_channels[i];
  }
  return blocks;
}

void require_fused(std::span<const Var> fused, const char* op) {
  if (fused.size() != phantom::kPhases)
    throw ShapeError(std::string(op) + ": expected 4 phase maps, got " + std::to_string(fused.size()));
  for (const Var& f : fused)
    if (f.value().rank() != 3 || f.shape() != fused[0].shape())
      throw ShapeError(std::string(op) + ": phase maps must share one [C,P,P] shape");
}

}  // namespace

void ModelConfig::validate() const {
  if (height != width) throw ConfigError("model input must be square");
  if (height % 16 != 0 || height < 32 || !spectral::is_power_of_two(height))
    throw ConfigError("model size must be a power of two >= 32 (divisible by 16), got " + std::to_string(height));
  if (encoder_channels.size() != 4 || decoder_channels.size() != 4)
    throw ConfigError("encoder and decoder need exactly four blocks");
  for (std::size_t c : encoder_channels)
    if (c == 0) throw ConfigError("encoder channel counts must be positive");
  for (std::size_t c : decoder_channels)
    if (c == 0) throw ConfigError("decoder channel counts must be positive");
  if (depth < 1) throw ConfigError("transformer depth must be >= 1");
  if (heads == 0 || head_dim == 0 || disc_heads == 0 || disc_head_dim == 0 || disc_dim == 0)
    throw ConfigError("attention sizes must be positive");
  if (disc_dim % 2 != 0) throw ConfigError("discriminator width must be even");
  if (!use_spa && !use_spe) throw ConfigError("at least one encoder branch must be enabled");
  if (!task_seg && !task_reg && !task_cls) throw ConfigError("at least one task must be enabled");
  if (!(input_scale > 0.0) || !(reg_scale > 0.0)) throw ConfigError("input and regression scales must be positive");
  high_pass.validate();
}

PreparedInput prepare_input(const Tensor& phases, const ModelConfig& config) {
  config.validate();
  if (phases.shape() != Shape{phantom::kPhases, config.height, config.width})
    throw ShapeError("prepare_input: expected phases [4," + std::to_string(config.height) + "," +
                     std::to_string(config.width) + "], got " + shape_string(phases.shape()));
  PreparedInput in;
  in.phases = phases;
  const std::size_t hw = config.height * config.width;
  for (std::size_t p = 0; p < phantom::kPhases; ++p) {
    Tensor raw({config.height, config.width}, std::vector<double>(phases.data() + p * hw, phases.data() + (p + 1) * hw));
    Tensor spe = spectral::spectral_preprocess(raw, config.high_pass);
    for (double& v : raw.values()) v *= config.input_scale;
    for (double& v : spe.values()) v *= config.input_scale;
    in.spatial[p] = std::move(raw);
    in.spectral[p] = std::move(spe);
  }
  return in;
}

Generator::Generator(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(mix_seed(seed, kGeneratorStream));
  spatial_encoder_ = make_encoder(params_, "enc.spa", config_, rng);
  if (!config_.share_branch_weights) spectral_encoder_ = make_encoder(params_, "enc.spe", config_, rng);

  if (config_.task_seg) {
    std::size_t in = phantom::kPhases * config_.channels();
    for (std::size_t i = 0; i < config_.decoder_channels.size(); ++i) {
      decoder_.push_back(
          make_deconv_block(params_, "dec.block" + std::to_string(i), in, config_.decoder_channels[i], rng));
      in = config_.decoder_channels[i];
    }
    head_weight_ =
        params_.add("dec.head.weight", uniform_tensor({1, in, 1, 1}, std::sqrt(3.0 / static_cast<double>(in)), rng));
    head_bias_ = params_.add("dec.head.bias", Tensor({1}, 0.0));
  }
  if (!config_.trunk_active()) return;

  const std::size_t d = config_.token_dim();
  TransformerConfig tc{d, config_.heads, config_.head_dim, config_.ff_dim ? config_.ff_dim : 4 * d};
  for (std::size_t i = 0; i < config_.depth; ++i)
    trunk_.push_back(make_transformer_block(params_, "trunk.block" + std::to_string(i), tc, rng));
  if (config_.task_reg) {
    // Small weights and a 0.5 bias start every regression output near mid-range intensity.
    reg_head_ = make_linear(params_, "head.reg", d, phantom::kPhases, rng, 0.01);
    reg_head_.bias.value_mut().fill(0.5);
  }
  // Near-zero logits at the start: the pooled features move fast under the
  // regression loss, and a random initial sign takes thousands of steps to undo.
  if (config_.task_cls) cls_head_ = make_linear(params_, "head.cls", d, 2, rng, 0.01);
}

const std::vector<ConvBlock>& Generator::encoder(Branch b) const {
  if (b == Branch::spectral && !config_.share_branch_weights) return spectral_encoder_;
  return spatial_encoder_;
}

Discriminator::Discriminator(const ModelConfig& config, std::uint64_t seed) : dim_(config.disc_dim) {
  config.validate();
  Rng rng(mix_seed(seed, kDiscriminatorStream));
  embed_weight_ = params_.add("tdd.embed.weight", uniform_tensor({kDiscriminatorSlots, dim_}, 1.0, rng));
  embed_bias_ = params_.add("tdd.embed.bias", uniform_tensor({kDiscriminatorSlots, dim_}, 0.1, rng));
  block_ = make_transformer_block(params_, "tdd.block",
                                  TransformerConfig{dim_, config.disc_heads, config.disc_head_dim, 2 * dim_}, rng);
  out_ = make_linear(params_, "tdd.out", dim_, 1, rng, 1.0 / std::sqrt(2.0));
}

Var encode_phase(const Generator& g, const Tensor& input, Branch branch, bool training) {
  const ModelConfig& cfg = g.config();
  if (input.shape() != Shape{cfg.height, cfg.width})
    throw ShapeError("encode_phase: expected [" + std::to_string(cfg.height) + "," + std::to_string(cfg.width) +
                     "], got " + shape_string(input.shape()));
  Var x(input.reshaped({1, cfg.height, cfg.width}));
  for (const ConvBlock& block : g.encoder(branch)) x = conv_block(block, x, training);
  return x;
}

std::vector<Var> encode_phases(const Generator& g, std::span<const Tensor> inputs, Branch branch, bool training) {
  const ModelConfig& cfg = g.config();
  if (inputs.size() != phantom::kPhases) throw ShapeError("encode_phases: expected 4 phase images");
  std::vector<Var> images;
  for (const Tensor& t : inputs) {
    if (t.shape() != Shape{cfg.height, cfg.width}) throw ShapeError("encode_phases: bad phase shape " + shape_string(t.shape()));
    images.emplace_back(t.reshaped({1, cfg.height, cfg.width}));
  }
  Var x = ops::concat(images);
  for (const ConvBlock& block : g.encoder(branch)) x = conv_block(block, x, training, phantom::kPhases);
  const std::size_t c = x.shape()[0] / phantom::kPhases;
  std::vector<Var> maps;
  for (std::size_t p = 0; p < phantom::kPhases; ++p) maps.push_back(ops::slice_rows(x, p * c, c));
  return maps;
}

Var mdief_fuse(const Var& x_spa, const Var& x_spe, FusionWeights* weights) {
  if (x_spa.value().rank() != 3 || x_spa.shape() != x_spe.shape())
    throw ShapeError("mdief_fuse: shapes " + shape_string(x_spa.shape()) + " and " + shape_string(x_spe.shape()) +
                     " do not match");
  const std::size_t c = x_spa.shape()[0];
  const Var pooled[2] = {ops::reshape(ops::global_avg_pool(x_spa), {1, c}),
                         ops::reshape(ops::global_avg_pool(x_spe), {1, c})};
  const Var gamma = ops::transpose(ops::softmax_rows(ops::transpose(ops::concat(pooled))));  // [2, C]
  const Var g_spa = ops::reshape(ops::slice_rows(gamma, 0, 1), {c});
  const Var g_spe = ops::reshape(ops::slice_rows(gamma, 1, 1), {c});
  if (weights) *weights = {g_spa.value(), g_spe.value()};
  return ops::add(ops::channel_scale(x_spa, ops::add_scalar(g_spa, 1.0)),
                  ops::channel_scale(x_spe, ops::add_scalar(g_spe, 1.0)));
}

Var segment(const Generator& g, std::span<const Var> fused, bool training) {
  require_fused(fused, "segment");
  if (!g.config().task_seg) throw ContractError("segment: the segmentation task is disabled");
  Var x = ops::concat(fused);
  for (const DeconvBlock& block : g.decoder()) x = deconv_block(block, x, training);
  x = ops::conv2d(x, g.head_weight(), g.head_bias(), 0);
  return ops::reshape(x, {x.shape()[1], x.shape()[2]});
}

Var build_tokens(std::span<const Var> fused) {
  require_fused(fused, "build_tokens");
  const Shape& s = fused[0].shape();
  const std::size_t n = phantom::kPhases * s[0], d = s[1] * s[2];
  if (d < 4 || d % 2 != 0) throw ConfigError("token dim P^2 must be even and >= 4, got " + std::to_string(d));
  Var tokens = ops::reshape(ops::concat(fused), {n, d});
  if (tokens.shape()[0] != phantom::kPhases * s[0]) throw ContractError("token count must equal 4C");
  return ops::add(tokens, Var(positional_encoding(n, d)));
}

HeadOutputs trunk_and_heads(const Generator& g, const Var& tokens, std::vector<AttentionTrace>* traces) {
  if (!g.config().trunk_active()) throw ContractError("trunk_and_heads: regression and classification are disabled");
  Var x = tokens;
  for (const TransformerBlock& block : g.trunk()) {
    AttentionTrace* trace = nullptr;
    if (traces) trace = &traces->emplace_back();
    x = transformer_block(block, x, trace);
  }
  const Var pooled = ops::mean_rows(x);
  HeadOutputs out;
  if (g.config().task_reg) out.reg = ops::scale(linear(g.reg_head(), pooled), g.config().reg_scale);
  if (g.config().task_cls) out.cls_prob = softmax(linear(g.cls_head(), pooled));
  return out;
}

Var tim_derive(const Var& seg_prob, const Tensor& phases) {
  if (seg_prob.value().rank() != 2 || phases.rank() != 3 || phases.dim(0) != phantom::kPhases ||
      phases.dim(1) != seg_prob.shape()[0] || phases.dim(2) != seg_prob.shape()[1])
    throw ShapeError("tim_derive: mask " + shape_string(seg_prob.shape()) + " does not fit phases " +
                     shape_string(phases.shape()));
  const std::size_t hw = seg_prob.size();
  const Var weighted = ops::matmul(Var(phases.reshaped({phantom::kPhases, hw})), ops::reshape(seg_prob, {hw, 1}));
  // eps floors the mass instead of being added to it, so a hard mask gives its exact mean.
  const Var mass = ops::sum(seg_prob);
  const Var norm = mass.item() >= kTimEpsilon ? mass : Var(Tensor::scalar(kTimEpsilon));
  return ops::reshape(ops::div_scalar(weighted, norm), {phantom::kPhases});
}

Var tdd_discriminate(const Discriminator& d, const Var& y_ic) {
  if (y_ic.shape() != Shape{kDiscriminatorSlots})
    throw ShapeError("tdd_discriminate: expected [6], got " + shape_string(y_ic.shape()));
  if (!y_ic.value().all_finite()) throw ContractError("tdd_discriminate: non-finite input");
  const std::size_t dim = d.embed_weight().shape()[1];
  const Var spread = ops::matmul(ops::reshape(y_ic, {kDiscriminatorSlots, 1}), Var(Tensor({1, dim}, 1.0)));
  Var tokens = ops::add(ops::mul(spread, d.embed_weight()), d.embed_bias());
  tokens = ops::add(tokens, Var(positional_encoding(kDiscriminatorSlots, dim)));
  const Var pooled = ops::mean_rows(transformer_block(d.block(), tokens));
  return ops::sigmoid(linear(d.out(), pooled));
}

ForwardResult forward(const Generator& g, const PreparedInput& input, bool training) {
  const ModelConfig& cfg = g.config();
  std::optional<FrozenStatsGuard> frozen;
  if (!training && cfg.eval_batch_stats) {
    frozen.emplace();
    training = true;
  }
  ForwardResult out;
  std::vector<Var> fused;
  const bool mdief = cfg.use_mdief && cfg.use_spa && cfg.use_spe;
  auto encode_all = [&](const std::array<Tensor, phantom::kPhases>& images, Branch branch) {
    if (cfg.phase_batch_norm) return encode_phases(g, images, branch, training);
    std::vector<Var> maps;
    for (const Tensor& t : images) maps.push_back(encode_phase(g, t, branch, training));
    return maps;
  };
  std::vector<Var> spa_maps, spe_maps;
  if (cfg.use_spa) spa_maps = encode_all(input.spatial, Branch::spatial);
  if (cfg.use_spe) spe_maps = encode_all(input.spectral, Branch::spectral);
  for (std::size_t p = 0; p < phantom::kPhases; ++p) {
    Var spa = cfg.use_spa ? spa_maps[p] : Var();
    Var spe = cfg.use_spe ? spe_maps[p] : Var();
    if (mdief) {
      FusionWeights w;
      fused.push_back(mdief_fuse(spa, spe, &w));
      out.fusion.push_back(std::move(w));
    } else if (cfg.use_spa && cfg.use_spe) {
      fused.push_back(ops::add(spa, spe));
    } else {
      // A single branch keeps weight (1, 0): x (1 + 1).
      fused.push_back(ops::scale(cfg.use_spa ? spa : spe, 2.0));
    }
  }
  out.fused = fused;
  if (cfg.task_seg) {
    out.seg_logits = segment(g, fused, training);
    out.seg_prob = ops::sigmoid(out.seg_logits);
  }
  if (cfg.trunk_active()) {
    HeadOutputs heads = trunk_and_heads(g, build_tokens(fused));
    if (cfg.task_reg) out.reg = heads.reg;
    if (cfg.task_cls) out.cls_prob = heads.cls_prob;
  }
  if (cfg.tim_active()) out.tim = tim_derive(out.seg_prob, input.phases);
  return out;
}

Var real_pair(const Tensor& enhancement, int label) {
  if (enhancement.shape() != Shape{phantom::kPhases}) throw ShapeError("real_pair: enhancement must be [4]");
  if (label != 0 && label != 1) throw ContractError("real_pair: label must be 0 or 1");
  Tensor t({kDiscriminatorSlots});
  for (std::size_t p = 0; p < phantom::kPhases; ++p) t[p] = enhancement[p] / 255.0;
  t[4 + static_cast<std::size_t>(label)] = 1.0;
  return Var(t);
}

Var fake_pair(const Var& reg, const Var& cls_prob) {
  const Var parts[2] = {ops::scale(reg, 1.0 / 255.0), cls_prob};
  return ops::concat(parts);
}

}  // namespace mtinet
