#pragma once

#include <string>
#include <vector>

#include "mtinet/autograd.hpp"
#include "mtinet/rng.hpp"

namespace mtinet {

// Layer parameter bundles. Each make_* registers its tensors in a
// ParameterSet under `prefix` and returns handles that share storage with it.

struct BatchNorm2d {
  Var gamma;
  Var beta;
  Var running_mean;
  Var running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  /// x [G*C,H,W] is a batch of `groups` images.
  Var operator()(const Var& x, bool training, std::size_t groups = 1) const;
};
BatchNorm2d make_batch_norm(ParameterSet& params, const std::string& prefix, std::size_t channels);

/// conv 3x3 (stride 1, pad 1) -> batch norm -> ReLU -> max-pool 2x2.
struct ConvBlock {
  Var weight;  // [out, in, 3, 3]
  Var bias;
  BatchNorm2d norm;
};
ConvBlock make_conv_block(ParameterSet& params, const std::string& prefix, std::size_t in_channels,
                          std::size_t out_channels, Rng& rng);
/// [C_in,H,W] -> [C_out,H/2,W/2]; odd H or W is a ShapeError. With groups > 1
/// the input is a batch [G*C_in,H,W] of G images sharing the weights and the
/// batch-norm statistics.
Var conv_block(const ConvBlock& block, const Var& input, bool training, std::size_t groups = 1);

/// transposed conv 4x4 (stride 2, pad 1) -> batch norm -> ReLU.
struct DeconvBlock {
  Var weight;  // [in, out, 4, 4]
  Var bias;
  BatchNorm2d norm;
};
DeconvBlock make_deconv_block(ParameterSet& params, const std::string& prefix, std::size_t in_channels,
                              std::size_t out_channels, Rng& rng);
/// [C_in,H,W] -> [C_out,2H,2W]
Var deconv_block(const DeconvBlock& block, const Var& input, bool training);

struct Linear {
  Var weight;  // [out, in]
  Var bias;    // [out]
};
/// He-uniform weights by default; `gain` rescales the bound.
Linear make_linear(ParameterSet& params, const std::string& prefix, std::size_t in_dim, std::size_t out_dim,
                   Rng& rng, double gain = 1.0);
Var linear(const Linear& layer, const Var& input);

/// Softmax of a 1-D tensor.
Var softmax(const Var& logits);

struct LayerNorm {
  Var gamma;
  Var beta;
};

struct TransformerConfig {
  std::size_t dim = 4;       // token width D
  std::size_t heads = 1;
  std::size_t head_dim = 64;  // d_k; attention scores are divided by sqrt(d_k)
  std::size_t ff_dim = 16;

  void validate() const;
};

struct AttentionHead {
  Var query;   // [D, d_k]
  Var key;     // [D, d_k]
  Var value;   // [D, d_k]
  Var output;  // [d_k, D], this head's slice of the output projection
};

/// Post-norm encoder block: x + MHA(x) -> LN -> h + FFN(h) -> LN.
struct TransformerBlock {
  TransformerConfig config;
  std::vector<AttentionHead> heads;
  Var output_bias;
  LayerNorm norm1;
  Linear ff1;
  Linear ff2;
  LayerNorm norm2;
};
TransformerBlock make_transformer_block(ParameterSet& params, const std::string& prefix,
                                        const TransformerConfig& config, Rng& rng);

/// Attention probabilities per head, filled when requested.
struct AttentionTrace {
  std::vector<Tensor> weights;  // one [N, N] matrix per head
};

Var multi_head_attention(const TransformerBlock& block, const Var& tokens, AttentionTrace* trace = nullptr);
/// tokens [N, D] -> [N, D]
Var transformer_block(const TransformerBlock& block, const Var& tokens, AttentionTrace* trace = nullptr);

/// Sinusoidal table: row p, column 2i = sin(p / 10000^(2i/dim)), 2i+1 = cos.
Tensor positional_encoding(std::size_t n_tokens, std::size_t dim);

}  // namespace mtinet
