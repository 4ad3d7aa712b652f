#include "mtinet/layers.hpp"

#include <cmath>

#include "mtinet/errors.hpp"

namespace mtinet {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

LayerNorm make_layer_norm(ParameterSet& params, const std::string& prefix, std::size_t dim) {
  return {params.add(prefix + ".gamma", Tensor({dim}, 1.0)), params.add(prefix + ".beta", Tensor({dim}, 0.0))};
}

}  // namespace

Var BatchNorm2d::operator()(const Var& x, bool training, std::size_t groups) const {
  // Handles share storage, so the copies update the registered buffers.
  Var mean_buffer = running_mean;
  Var var_buffer = running_var;
  ops::BatchNormState state{&mean_buffer.value_mut(), &var_buffer.value_mut(), momentum, eps, groups};
  return ops::batch_norm(x, gamma, beta, state, training);
}

BatchNorm2d make_batch_norm(ParameterSet& params, const std::string& prefix, std::size_t channels) {
  BatchNorm2d bn;
  bn.gamma = params.add(prefix + ".gamma", Tensor({channels}, 1.0));
  bn.beta = params.add(prefix + ".beta", Tensor({channels}, 0.0));
  bn.running_mean = params.add_buffer(prefix + ".running_mean", Tensor({channels}, 0.0));
  bn.running_var = params.add_buffer(prefix + ".running_var", Tensor({channels}, 1.0));
  return bn;
}

ConvBlock make_conv_block(ParameterSet& params, const std::string& prefix, std::size_t in_channels,
                          std::size_t out_channels, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_channels * 9));
  ConvBlock block;
  block.weight = params.add(prefix + ".conv.weight", uniform_tensor({out_channels, in_channels, 3, 3}, bound, rng));
  block.bias = params.add(prefix + ".conv.bias", Tensor({out_channels}, 0.0));
  block.norm = make_batch_norm(params, prefix + ".bn", out_channels);
  return block;
}

Var conv_block(const ConvBlock& block, const Var& input, bool training, std::size_t groups) {
  if (input.value().rank() != 3) throw ShapeError("conv_block expects [C,H,W], got " + shape_string(input.shape()));
  if (input.shape()[1] % 2 || input.shape()[2] % 2) {
    throw ShapeError("conv_block needs even spatial extents, got " + shape_string(input.shape()));
  }
  if (groups == 0 || input.shape()[0] % groups) throw ShapeError("conv_block: channels do not split into groups");
  Var x;
  if (groups == 1) {
    x = ops::conv2d(input, block.weight, block.bias, 1);
  } else {
    const std::size_t per = input.shape()[0] / groups;
    std::vector<Var> images;
    for (std::size_t g = 0; g < groups; ++g)
      images.push_back(ops::conv2d(ops::slice_rows(input, g * per, per), block.weight, block.bias, 1));
    x = ops::concat(images);
  }
  x = block.norm(x, training, groups);
  x = ops::relu(x);
  return ops::max_pool2x2(x);
}

DeconvBlock make_deconv_block(ParameterSet& params, const std::string& prefix, std::size_t in_channels,
                              std::size_t out_channels, Rng& rng) {
  // Each output pixel of a stride-2 4x4 transposed conv sees 2x2 taps per input channel.
  const double bound = std::sqrt(6.0 / static_cast<double>(in_channels * 4));
  DeconvBlock block;
  block.weight = params.add(prefix + ".deconv.weight", uniform_tensor({in_channels, out_channels, 4, 4}, bound, rng));
  block.bias = params.add(prefix + ".deconv.bias", Tensor({out_channels}, 0.0));
  block.norm = make_batch_norm(params, prefix + ".bn", out_channels);
  return block;
}

Var deconv_block(const DeconvBlock& block, const Var& input, bool training) {
  Var x = ops::conv_transpose2d(input, block.weight, block.bias, 2, 1);
  x = block.norm(x, training);
  return ops::relu(x);
}

Linear make_linear(ParameterSet& params, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                   Rng& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(in_dim));
  return {params.add(prefix + ".weight", uniform_tensor({out_dim, in_dim}, bound, rng)),
          params.add(prefix + ".bias", Tensor({out_dim}, 0.0))};
}

Var linear(const Linear& layer, const Var& input) { return ops::linear(input, layer.weight, layer.bias); }

Var softmax(const Var& logits) {
  if (logits.value().rank() != 1) throw ShapeError("softmax expects a vector, got " + shape_string(logits.shape()));
  return ops::softmax_rows(logits);
}

void TransformerConfig::validate() const {
  if (dim == 0 || heads == 0 || head_dim == 0 || ff_dim == 0) throw ConfigError("transformer sizes must be positive");
  if (dim % heads != 0) {
    throw ConfigError("token width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
}

TransformerBlock make_transformer_block(ParameterSet& params, const std::string& prefix,
                                        const TransformerConfig& config, Rng& rng) {
  config.validate();
  TransformerBlock block;
  block.config = config;
  // Variance-preserving bounds for the linear projections.
  const double in_bound = std::sqrt(3.0 / static_cast<double>(config.dim));
  const double out_bound = std::sqrt(3.0 / static_cast<double>(config.head_dim * config.heads));
  for (std::size_t h = 0; h < config.heads; ++h) {
    const std::string p = prefix + ".attn.head" + std::to_string(h);
    AttentionHead head;
    head.query = params.add(p + ".query", uniform_tensor({config.dim, config.head_dim}, in_bound, rng));
    head.key = params.add(p + ".key", uniform_tensor({config.dim, config.head_dim}, in_bound, rng));
    head.value = params.add(p + ".value", uniform_tensor({config.dim, config.head_dim}, in_bound, rng));
    head.output = params.add(p + ".output", uniform_tensor({config.head_dim, config.dim}, out_bound, rng));
    block.heads.push_back(head);
  }
  block.output_bias = params.add(prefix + ".attn.output_bias", Tensor({config.dim}, 0.0));
  block.norm1 = make_layer_norm(params, prefix + ".norm1", config.dim);
  block.ff1 = make_linear(params, prefix + ".ff1", config.dim, config.ff_dim, rng);
  block.ff2 = make_linear(params, prefix + ".ff2", config.ff_dim, config.dim, rng, 1.0 / std::sqrt(2.0));
  block.norm2 = make_layer_norm(params, prefix + ".norm2", config.dim);
  return block;
}

Var multi_head_attention(const TransformerBlock& block, const Var& tokens, AttentionTrace* trace) {
  const TransformerConfig& cfg = block.config;
  if (tokens.value().rank() != 2 || tokens.shape()[1] != cfg.dim) {
    throw ShapeError("attention expects tokens [N," + std::to_string(cfg.dim) + "], got " +
                     shape_string(tokens.shape()));
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  // With d_k > D the projections have rank <= D, so (X Wq)(X Wk)^T is
  // evaluated as X (Wq Wk^T) X^T and A (X Wv) Wo as A (X (Wv Wo)): same
  // values, O(N^2 D) instead of O(N^2 d_k).
  const bool factored = cfg.head_dim > cfg.dim;
  Var out;
  for (const AttentionHead& head : block.heads) {
    Var scores;
    Var mixed_values;
    if (factored) {
      Var qk = ops::matmul_nt(head.query, head.key);                     // [D, D]
      scores = ops::matmul_nt(ops::matmul(tokens, qk), tokens);          // [N, N]
      mixed_values = ops::matmul(tokens, ops::matmul(head.value, head.output));  // [N, D]
    } else {
      Var q = ops::matmul(tokens, head.query);
      Var k = ops::matmul(tokens, head.key);
      scores = ops::matmul_nt(q, k);
      mixed_values = ops::matmul(ops::matmul(tokens, head.value), head.output);
    }
    Var attn = ops::softmax_rows(ops::scale(scores, inv_scale));
    if (trace) trace->weights.push_back(attn.value());
    Var head_out = ops::matmul(attn, mixed_values);
    out = out.defined() ? ops::add(out, head_out) : head_out;
  }
  return ops::add_bias_rows(out, block.output_bias);
}

Var transformer_block(const TransformerBlock& block, const Var& tokens, AttentionTrace* trace) {
  Var h = ops::add(tokens, multi_head_attention(block, tokens, trace));
  h = ops::layer_norm_rows(h, block.norm1.gamma, block.norm1.beta);
  Var ff = linear(block.ff2, ops::relu(linear(block.ff1, h)));
  Var out = ops::add(h, ff);
  return ops::layer_norm_rows(out, block.norm2.gamma, block.norm2.beta);
}

Tensor positional_encoding(std::size_t n_tokens, std::size_t dim) {
  if (dim == 0 || dim % 2) throw ConfigError("positional encoding width must be even, got " + std::to_string(dim));
  if (n_tokens == 0) throw ConfigError("positional encoding needs at least one token");
  Tensor pe = Tensor::zeros({n_tokens, dim});
  for (std::size_t pos = 0; pos < n_tokens; ++pos)
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      pe.at(pos, 2 * i) = std::sin(angle);
      pe.at(pos, 2 * i + 1) = std::cos(angle);
    }
  return pe;
}

}  // namespace mtinet
