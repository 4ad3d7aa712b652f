#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "mtinet/autograd.hpp"
#include "mtinet/model.hpp"

namespace mtinet {

inline constexpr double kLogEpsilon = 1e-7;

/// Mean pixel-wise binary cross-entropy, probabilities clamped to [eps, 1 - eps].
Var seg_loss(const Var& seg_prob, const Tensor& mask);
/// Mean absolute error over all entries.
Var reg_loss(const Var& prediction, const Tensor& target);
/// -log p_label, clamped at eps.
Var cls_loss(const Var& cls_prob, int label);
/// L1 between the TIM-derived and the target enhancement.
Var tim_loss(const Var& derived, const Tensor& target);

struct AdversarialLosses {
  Var discriminator;  // -[log d_real + log(1 - d_fake)]
  Var generator;      // -log d_fake
};
AdversarialLosses adversarial_losses(const Var& d_real, const Var& d_fake);
Var discriminator_loss(const Var& d_real, const Var& d_fake);
Var generator_adversarial_loss(const Var& d_fake);

struct LossWeights {
  double seg = 1.0;
  double reg = 1.0;
  double cls = 1.0;
  // The interaction term is an L1 in intensity units; 1/255 puts it on the
  // normalised scale so it does not outweigh the per-pixel segmentation loss.
  double tim = 1.0 / 255.0;
  double adv = 1.0;

  void validate() const;
};

/// Loss terms of one generator step; a term is defined iff it is enabled.
struct LossParts {
  Var seg, reg, cls, tim, adv;
};

/// Weighted sum of the defined terms. A positive weight on an undefined term
/// is ignored, with a warning when `warn` is set.
Var total_generator_loss(const LossParts& parts, const LossWeights& weights, bool warn = true);

// ---- metrics ----

/// seg_prob > 0.5 -> 1.
Tensor threshold_mask(const Tensor& seg_prob, double level = 0.5);
/// Percentages; two empty masks score 100.
double dsc(const Tensor& pred, const Tensor& gt);
double iou(const Tensor& pred, const Tensor& gt);
/// Mean absolute error in intensity units.
double mae_metric(const Tensor& pred, const Tensor& target);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};
MeanStd mean_std(std::span<const double> values);

struct ConfusionMatrix {
  std::array<std::array<std::size_t, 2>, 2> counts{};  // [true][predicted]
  std::size_t total() const;
  std::array<std::array<double, 2>, 2> row_percent() const;
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  ConfusionMatrix confusion;
};

/// Argmax decision, ties go to class 0.
int predicted_class(const Tensor& cls_prob);
ClassificationMetrics classify_metrics(std::span<const Tensor> cls_probs, std::span<const int> labels);

}  // namespace mtinet
