#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mtinet/autograd.hpp"
#include "mtinet/layers.hpp"
#include "mtinet/phantom.hpp"
#include "mtinet/spectral.hpp"

namespace mtinet {

struct ModelConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> encoder_channels{8, 16, 32, 64};
  std::vector<std::size_t> decoder_channels{64, 32, 16, 8};
  std::size_t heads = 1;
  std::size_t head_dim = 64;  // d_k
  std::size_t depth = 3;
  std::size_t ff_dim = 0;  // 0 selects 4 x token dim
  std::size_t disc_dim = 16;
  std::size_t disc_heads = 1;
  std::size_t disc_head_dim = 16;
  spectral::HighPassSpec high_pass{};
  bool share_branch_weights = false;
  bool phase_batch_norm = true;  // encoder batch-norm statistics pooled over the four phases
  bool eval_batch_stats = true;  // inference normalizes with the sample's own statistics
  double input_scale = 1.0 / 255.0;  // phase intensities are divided by 255 before the encoders
  double reg_scale = 255.0;          // regression head predicts intensity / reg_scale

  bool use_mdief = true;
  bool use_spe = true;
  bool use_spa = true;
  bool use_tim = true;
  bool use_tdd = true;
  bool task_seg = true;
  bool task_reg = true;
  bool task_cls = true;

  void validate() const;
  std::size_t channels() const { return encoder_channels.back(); }
  std::size_t patch() const { return height / 16; }  // P
  std::size_t token_dim() const { return patch() * patch(); }
  std::size_t token_count() const { return phantom::kPhases * channels(); }
  bool tim_active() const { return use_tim && task_seg && task_reg; }
  bool tdd_active() const { return use_tdd && task_reg && task_cls; }
  bool trunk_active() const { return task_reg || task_cls; }
};

enum class Branch { spatial, spectral };

/// Per-channel fusion weights; gamma_spa + gamma_spe = 1.
struct FusionWeights {
  Tensor gamma_spa;
  Tensor gamma_spe;
};

/// Encoder-ready views of one sample's phases.
struct PreparedInput {
  std::array<Tensor, phantom::kPhases> spatial;   // raw phase x input_scale
  std::array<Tensor, phantom::kPhases> spectral;  // high-passed phase x input_scale
  Tensor phases;                                  // [4,H,W] raw intensities
};
PreparedInput prepare_input(const Tensor& phases, const ModelConfig& config);

class Generator {
 public:
  Generator(const ModelConfig& config, std::uint64_t seed);
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;
  Generator(Generator&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  const std::vector<ConvBlock>& encoder(Branch b) const;
  const std::vector<DeconvBlock>& decoder() const { return decoder_; }
  const Var& head_weight() const { return head_weight_; }
  const Var& head_bias() const { return head_bias_; }
  const std::vector<TransformerBlock>& trunk() const { return trunk_; }
  const Linear& reg_head() const { return reg_head_; }
  const Linear& cls_head() const { return cls_head_; }

 private:
  ModelConfig config_;
  ParameterSet params_;
  std::vector<ConvBlock> spatial_encoder_;
  std::vector<ConvBlock> spectral_encoder_;
  std::vector<DeconvBlock> decoder_;
  Var head_weight_;  // [1, last decoder channels, 1, 1]
  Var head_bias_;
  std::vector<TransformerBlock> trunk_;
  Linear reg_head_;
  Linear cls_head_;
};

/// Transformer-based discriminator over [reg / 255 (4), class probabilities (2)].
class Discriminator {
 public:
  Discriminator(const ModelConfig& config, std::uint64_t seed);
  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;
  Discriminator(Discriminator&&) = default;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const Var& embed_weight() const { return embed_weight_; }
  const Var& embed_bias() const { return embed_bias_; }
  const TransformerBlock& block() const { return block_; }
  const Linear& out() const { return out_; }

 private:
  std::size_t dim_;
  ParameterSet params_;
  Var embed_weight_;  // [6, d], per-slot embedding
  Var embed_bias_;    // [6, d]
  TransformerBlock block_;
  Linear out_;
};

inline constexpr std::size_t kDiscriminatorSlots = 6;

/// [H,W] encoder input -> [C,P,P].
Var encode_phase(const Generator& g, const Tensor& input, Branch branch, bool training);
/// All four phases through one encoder as a four-image batch: the phases
/// share batch-norm statistics. Returns one [C,P,P] map per phase.
std::vector<Var> encode_phases(const Generator& g, std::span<const Tensor> inputs, Branch branch, bool training);

/// GAP per channel, two-way softmax per channel, x_spa (1 + g_spa) + x_spe (1 + g_spe).
Var mdief_fuse(const Var& x_spa, const Var& x_spe, FusionWeights* weights = nullptr);

/// Four fused [C,P,P] maps -> [H,W] segmentation logits.
Var segment(const Generator& g, std::span<const Var> fused, bool training);

/// Four fused [C,P,P] maps -> [4C, P^2] tokens, phase-major, with positional encoding.
Var build_tokens(std::span<const Var> fused);

struct HeadOutputs {
  Var reg;       // [4] intensity units
  Var cls_prob;  // [2]
};
HeadOutputs trunk_and_heads(const Generator& g, const Var& tokens, std::vector<AttentionTrace>* traces = nullptr);

inline constexpr double kTimEpsilon = 1e-6;
/// Soft-mask mean intensity per phase: sum(seg * phase) / max(sum(seg), eps).
Var tim_derive(const Var& seg_prob, const Tensor& phases);

/// Probability that y_ic [6] is a ground-truth pair.
Var tdd_discriminate(const Discriminator& d, const Var& y_ic);

struct ForwardResult {
  Var seg_logits;  // [H,W]
  Var seg_prob;    // [H,W]
  Var reg;         // [4]
  Var cls_prob;    // [2]
  Var tim;         // [4]
  std::vector<Var> fused;             // per-phase [C,P,P] maps entering the decoder and trunk
  std::vector<FusionWeights> fusion;  // one per phase when both branches are fused by MdIEF
};

ForwardResult forward(const Generator& g, const PreparedInput& input, bool training);

/// Discriminator inputs: ground truth uses a one-hot class vector.
Var real_pair(const Tensor& enhancement, int label);
Var fake_pair(const Var& reg, const Var& cls_prob);

}  // namespace mtinet
