#include "mtinet/losses.hpp"

#include <cmath>

#include "mtinet/errors.hpp"
#include "mtinet/log.hpp"

namespace mtinet {

namespace {

void require_target(const Var& prediction, const Tensor& target, const char* op) {
  if (prediction.shape() != target.shape())
    throw ShapeError(std::string(op) + ": prediction " + shape_string(prediction.shape()) + " vs target " +
                     shape_string(target.shape()));
}

void require_masks(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": masks " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

struct Overlap {
  double a = 0, b = 0, both = 0;
};

Overlap overlap(const Tensor& pred, const Tensor& gt) {
  Overlap o;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5, g = gt[i] > 0.5;
    o.a += p;
    o.b += g;
    o.both += p && g;
  }
  return o;
}

}  // namespace

Var seg_loss(const Var& seg_prob, const Tensor& mask) {
  require_target(seg_prob, mask, "seg_loss");
  Tensor background = mask;
  for (double& v : background.values()) v = 1.0 - v;
  const Var log_p = ops::log_clamped(seg_prob, kLogEpsilon, 1.0 - kLogEpsilon);
  const Var log_q = ops::log_clamped(ops::add_scalar(ops::neg(seg_prob), 1.0), kLogEpsilon, 1.0 - kLogEpsilon);
  return ops::neg(ops::mean(ops::add(ops::mul_const(log_p, mask), ops::mul_const(log_q, background))));
}

Var reg_loss(const Var& prediction, const Tensor& target) {
  require_target(prediction, target, "reg_loss");
  return ops::mean(ops::abs(ops::sub(prediction, Var(target))));
}

Var cls_loss(const Var& cls_prob, int label) {
  if (cls_prob.shape() != Shape{2}) throw ShapeError("cls_loss: expected [2], got " + shape_string(cls_prob.shape()));
  if (label != 0 && label != 1) throw ContractError("cls_loss: label must be 0 or 1, got " + std::to_string(label));
  const Var p = ops::slice_rows(cls_prob, static_cast<std::size_t>(label), 1);
  return ops::neg(ops::sum(ops::log_clamped(p, kLogEpsilon, 1.0)));
}

Var tim_loss(const Var& derived, const Tensor& target) {
  require_target(derived, target, "tim_loss");
  return ops::mean(ops::abs(ops::sub(derived, Var(target))));
}

Var discriminator_loss(const Var& d_real, const Var& d_fake) {
  const Var real_term = ops::log_clamped(d_real, kLogEpsilon, 1.0 - kLogEpsilon);
  const Var fake_term = ops::log_clamped(ops::add_scalar(ops::neg(d_fake), 1.0), kLogEpsilon, 1.0 - kLogEpsilon);
  return ops::neg(ops::sum(ops::add(real_term, fake_term)));
}

Var generator_adversarial_loss(const Var& d_fake) {
  return ops::neg(ops::sum(ops::log_clamped(d_fake, kLogEpsilon, 1.0 - kLogEpsilon)));
}

AdversarialLosses adversarial_losses(const Var& d_real, const Var& d_fake) {
  return {discriminator_loss(d_real, d_fake), generator_adversarial_loss(d_fake)};
}

void LossWeights::validate() const {
  for (double w : {seg, reg, cls, tim, adv})
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
}

Var total_generator_loss(const LossParts& parts, const LossWeights& weights, bool warn) {
  weights.validate();
  const std::pair<const Var*, double> terms[] = {
      {&parts.seg, weights.seg}, {&parts.reg, weights.reg}, {&parts.cls, weights.cls},
      {&parts.tim, weights.tim}, {&parts.adv, weights.adv}};
  const char* names[] = {"seg", "reg", "cls", "tim", "adv"};
  Var total;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& [term, w] = terms[i];
    if (!term->defined()) {
      if (warn && w > 0.0) log_warning(std::string("weight for disabled loss term '") + names[i] + "' ignored");
      continue;
    }
    const Var weighted = ops::scale(*term, w);
    total = total.defined() ? ops::add(total, weighted) : weighted;
  }
  if (!total.defined()) throw ContractError("total_generator_loss: no loss term is enabled");
  return total;
}

Tensor threshold_mask(const Tensor& seg_prob, double level) {
  Tensor out = seg_prob;
  for (double& v : out.values()) v = v > level ? 1.0 : 0.0;
  return out;
}

double dsc(const Tensor& pred, const Tensor& gt) {
  require_masks(pred, gt, "dsc");
  const Overlap o = overlap(pred, gt);
  if (o.a + o.b == 0.0) return 100.0;
  return 200.0 * o.both / (o.a + o.b);
}

double iou(const Tensor& pred, const Tensor& gt) {
  require_masks(pred, gt, "iou");
  const Overlap o = overlap(pred, gt);
  const double uni = o.a + o.b - o.both;
  if (uni == 0.0) return 100.0;
  return 100.0 * o.both / uni;
}

double mae_metric(const Tensor& pred, const Tensor& target) {
  require_masks(pred, target, "mae_metric");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / static_cast<double>(values.size()));
  return r;
}

std::size_t ConfusionMatrix::total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }

std::array<std::array<double, 2>, 2> ConfusionMatrix::row_percent() const {
  std::array<std::array<double, 2>, 2> out{};
  for (std::size_t r = 0; r < 2; ++r) {
    const double row = static_cast<double>(counts[r][0] + counts[r][1]);
    for (std::size_t c = 0; c < 2; ++c) out[r][c] = row > 0 ? 100.0 * static_cast<double>(counts[r][c]) / row : 0.0;
  }
  return out;
}

int predicted_class(const Tensor& cls_prob) {
  if (cls_prob.shape() != Shape{2}) throw ShapeError("predicted_class: expected [2]");
  return cls_prob[1] > cls_prob[0] ? 1 : 0;
}

ClassificationMetrics classify_metrics(std::span<const Tensor> cls_probs, std::span<const int> labels) {
  if (cls_probs.empty()) throw ContractError("classify_metrics: no samples");
  if (cls_probs.size() != labels.size()) throw ShapeError("classify_metrics: probability and label counts differ");
  ClassificationMetrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("classify_metrics: label out of range");
    const int pred = predicted_class(cls_probs[i]);
    ++m.confusion.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(pred)];
    correct += pred == labels[i];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return m;
}

}  // namespace mtinet
