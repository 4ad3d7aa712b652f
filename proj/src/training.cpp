#include "mtinet/training.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include "mtinet/errors.hpp"
#include "mtinet/log.hpp"
#include "mtinet/rng.hpp"

namespace mtinet {

namespace {

constexpr std::uint64_t kOrderStream = 0x5EED0000ULL;

bool finite(double v) { return std::isfinite(v); }

void warn_disabled_weights(const TrainConfig& config) {
  const ModelConfig& m = config.model;
  const std::pair<bool, std::pair<const char*, double>> checks[] = {
      {m.task_seg, {"seg", config.weights.seg}},   {m.task_reg, {"reg", config.weights.reg}},
      {m.task_cls, {"cls", config.weights.cls}},   {m.tim_active(), {"tim", config.weights.tim}},
      {m.tdd_active(), {"adv", config.weights.adv}}};
  for (const auto& [enabled, entry] : checks)
    if (!enabled && entry.second > 0.0)
      log_warning(std::string("weight for disabled loss term '") + entry.first + "' ignored");
}

void record(StepLosses& out, const std::string& name, double value) {
  if (!finite(value)) throw NumericalError("non-finite " + name + " loss (" + std::to_string(value) + ")");
  out.terms[name] = value;
}

Var batch_mean(const std::vector<Var>& terms) {
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  return terms.size() == 1 ? total : ops::scale(total, 1.0 / static_cast<double>(terms.size()));
}

double mean_of(const std::vector<Var>& terms) {
  double acc = 0.0;
  for (const Var& t : terms) acc += t.item();
  return acc / static_cast<double>(terms.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate > 0.0) || !finite(learning_rate)) throw ConfigError("learning rate must be > 0");
  if (!(disc_learning_rate >= 0.0) || !finite(disc_learning_rate))
    throw ConfigError("discriminator learning rate must be >= 0");
  if (folds < 2) throw ConfigError("fold count must be >= 2");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0,1)");
  weights.validate();
  model.validate();
}

std::vector<PreparedSample> prepare_samples(const phantom::Dataset& dataset, const ModelConfig& config) {
  std::vector<PreparedSample> out(dataset.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(dataset.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const phantom::Sample& s = dataset.samples[i];
    out[i].input = prepare_input(s.phases, config);
    out[i].mask = s.mask;
    out[i].enhancement = s.enhancement;
    out[i].label = s.label;
  }
  return out;
}

TrainingState::TrainingState(const TrainConfig& config, std::uint64_t seed)
    : generator(config.model, seed), discriminator(config.model, seed) {
  generator_opt.options.learning_rate = config.learning_rate;
  discriminator_opt.options.learning_rate = config.discriminator_lr();
}

StepLosses train_step(TrainingState& state, std::span<const PreparedSample* const> batch, const TrainConfig& config) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const ModelConfig& cfg = state.generator.config();
  StepLosses losses;

  std::vector<ForwardResult> outs;
  outs.reserve(batch.size());
  for (const PreparedSample* s : batch) outs.push_back(forward(state.generator, s->input, true));

  if (cfg.tdd_active()) {
    std::vector<Var> d_terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Var d_real = tdd_discriminate(state.discriminator, real_pair(batch[i]->enhancement, batch[i]->label));
      const Var d_fake =
          tdd_discriminate(state.discriminator, fake_pair(outs[i].reg.detach(), outs[i].cls_prob.detach()));
      d_terms.push_back(discriminator_loss(d_real, d_fake));
    }
    const Var d_loss = batch_mean(d_terms);
    record(losses, "disc", d_loss.item());
    backward(d_loss, state.discriminator.params());
    adam_step(state.discriminator.params(), state.discriminator_opt);
  }

  std::map<std::string, std::vector<Var>> parts_by_term;
  std::vector<Var> totals;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const PreparedSample& s = *batch[i];
    const ForwardResult& o = outs[i];
    LossParts parts;
    if (cfg.task_seg) parts.seg = seg_loss(o.seg_prob, s.mask);
    if (cfg.task_reg) parts.reg = reg_loss(o.reg, s.enhancement);
    if (cfg.task_cls) parts.cls = cls_loss(o.cls_prob, s.label);
    if (cfg.tim_active()) parts.tim = tim_loss(o.tim, s.enhancement);
    if (cfg.tdd_active())
      parts.adv = generator_adversarial_loss(tdd_discriminate(state.discriminator, fake_pair(o.reg, o.cls_prob)));
    for (auto [name, term] : {std::pair{"seg", &parts.seg}, {"reg", &parts.reg}, {"cls", &parts.cls},
                              {"tim", &parts.tim}, {"adv", &parts.adv}})
      if (term->defined()) parts_by_term[name].push_back(*term);
    totals.push_back(total_generator_loss(parts, config.weights, false));
  }
  for (const auto& [name, terms] : parts_by_term) record(losses, name, mean_of(terms));
  const Var total = batch_mean(totals);
  record(losses, "total", total.item());
  backward(total, state.generator.params());
  adam_step(state.generator.params(), state.generator_opt);
  return losses;
}

EvalReport evaluate(const Generator& generator, const std::vector<PreparedSample>& data,
                    const std::vector<std::size_t>& indices) {
  const ModelConfig& cfg = generator.config();
  NoGradGuard no_grad;
  EvalReport report;
  report.samples = indices.size();
  std::vector<double> dscs, ious, maes;
  std::vector<Tensor> probs;
  std::vector<int> labels;
  for (std::size_t idx : indices) {
    const PreparedSample& s = data.at(idx);
    ForwardResult o = forward(generator, s.input, false);
    SamplePrediction pred;
    pred.index = idx;
    if (cfg.task_seg) {
      pred.seg_prob = o.seg_prob.value();
      const Tensor mask = threshold_mask(pred.seg_prob);
      dscs.push_back(dsc(mask, s.mask));
      ious.push_back(iou(mask, s.mask));
    }
    if (cfg.task_reg) {
      pred.reg = o.reg.value();
      maes.push_back(mae_metric(pred.reg, s.enhancement));
    }
    if (cfg.task_cls) {
      pred.cls_prob = o.cls_prob.value();
      probs.push_back(pred.cls_prob);
      labels.push_back(s.label);
    }
    report.predictions.push_back(std::move(pred));
  }
  if (indices.empty()) return report;
  if (cfg.task_seg) {
    report.dsc = mean_std(dscs);
    report.iou = mean_std(ious);
  }
  if (cfg.task_reg) report.mae = mean_std(maes);
  if (cfg.task_cls) {
    ClassificationMetrics m = classify_metrics(probs, labels);
    report.accuracy = m.accuracy;
    report.confusion = m.confusion;
  }
  return report;
}

void init_regression_bias(Generator& generator, const std::vector<PreparedSample>& data,
                          const std::vector<std::size_t>& indices) {
  const ModelConfig& cfg = generator.config();
  if (!cfg.task_reg || indices.empty()) return;
  Tensor& bias = generator.params().at("head.reg.bias").value_mut();
  bias.fill(0.0);
  for (std::size_t i : indices)
    for (std::size_t p = 0; p < phantom::kPhases; ++p) bias[p] += data.at(i).enhancement[p];
  for (double& b : bias.values()) b /= static_cast<double>(indices.size()) * cfg.reg_scale;
}

FoldReport run_fold(const std::vector<PreparedSample>& data, const phantom::Fold& fold, std::size_t fold_index,
                    const TrainConfig& config, std::optional<TrainingState>* state_out) {
  config.validate();
  for (std::size_t i : fold.test)
    if (std::find(fold.train.begin(), fold.train.end(), i) != fold.train.end())
      throw ContractError("run_fold: sample " + std::to_string(i) + " is in both train and test");
  if (fold.train.empty()) throw ContractError("run_fold: empty training set");

  const auto start = std::chrono::steady_clock::now();
  std::optional<TrainingState> local;
  std::optional<TrainingState>& state = state_out ? *state_out : local;
  state.emplace(config, mix_seed(config.seed, fold_index));
  init_regression_bias(state->generator, data, fold.train);
  Rng order_rng(mix_seed(config.seed, kOrderStream + fold_index));

  FoldReport report;
  report.fold = fold_index;
  report.train_size = fold.train.size();
  std::vector<std::size_t> order = fold.train;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng.engine());
    std::map<std::string, double> sums;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      std::vector<const PreparedSample*> batch;
      for (std::size_t j = begin; j < std::min(order.size(), begin + config.batch_size); ++j)
        batch.push_back(&data.at(order[j]));
      StepLosses l = train_step(*state, batch, config);
      for (const auto& [name, v] : l.terms) sums[name] += v;
      ++steps;
    }
    report.steps += steps;
    for (const auto& [name, v] : sums) report.traces[name].push_back(v / static_cast<double>(steps));
  }
  report.test = evaluate(state->generator, data, fold.test);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

Aggregate aggregate_folds(const std::vector<FoldReport>& folds) {
  Aggregate agg;
  auto collect = [&](auto getter) -> std::optional<MeanStd> {
    std::vector<double> values;
    for (const FoldReport& f : folds)
      if (auto v = getter(f.test)) values.push_back(*v);
    if (values.empty()) return std::nullopt;
    return mean_std(values);
  };
  agg.dsc = collect([](const EvalReport& e) { return e.dsc ? std::optional(e.dsc->mean) : std::nullopt; });
  agg.iou = collect([](const EvalReport& e) { return e.iou ? std::optional(e.iou->mean) : std::nullopt; });
  agg.mae = collect([](const EvalReport& e) { return e.mae ? std::optional(e.mae->mean) : std::nullopt; });
  agg.accuracy = collect([](const EvalReport& e) { return e.accuracy; });
  return agg;
}

namespace {

CrossValReport cross_validate_quiet(const std::vector<PreparedSample>& data, const std::vector<int>& labels,
                                    const TrainConfig& config, std::size_t jobs) {
  config.validate();
  if (labels.size() != data.size()) throw ContractError("cross_validate: label count differs from sample count");
  const auto folds = phantom::kfold_split(labels, config.folds, config.seed);
  CrossValReport report;
  report.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f; (f = next++) < folds.size();) {
      try {
        report.folds[f] = run_fold(data, folds[f], f, config);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, folds.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  report.aggregate = aggregate_folds(report.folds);
  return report;
}

}  // namespace

CrossValReport cross_validate(const std::vector<PreparedSample>& data, const std::vector<int>& labels,
                              const TrainConfig& config, std::size_t jobs) {
  config.validate();
  warn_disabled_weights(config);
  return cross_validate_quiet(data, labels, config, jobs);
}

std::vector<std::pair<std::string, ModelConfig>> ablation_variants(const ModelConfig& base) {
  std::vector<std::pair<std::string, ModelConfig>> v;
  auto with = [&](const char* name, bool ModelConfig::*flag) {
    ModelConfig m = base;
    m.*flag = false;
    v.emplace_back(name, m);
  };
  with("No MdIEF", &ModelConfig::use_mdief);
  with("No Spe", &ModelConfig::use_spe);
  with("No Spa", &ModelConfig::use_spa);
  with("No TIM", &ModelConfig::use_tim);
  with("No TDD", &ModelConfig::use_tdd);
  v.emplace_back("MTI-Net", base);
  return v;
}

std::vector<std::pair<std::string, ModelConfig>> synergy_variants(const ModelConfig& base) {
  std::vector<std::pair<std::string, ModelConfig>> v;
  auto with = [&](const char* name, bool reg, bool cls) {
    ModelConfig m = base;
    m.task_seg = true;
    m.task_reg = reg;
    m.task_cls = cls;
    v.emplace_back(name, m);
  };
  with("Seg-only", false, false);
  with("Seg + Reg", true, false);
  with("Seg + Cls", false, true);
  v.emplace_back("MTI-Net", base);
  return v;
}

namespace {

std::vector<VariantResult> run_variants(const phantom::Dataset& dataset, const TrainConfig& config, std::size_t jobs,
                                        const std::vector<std::pair<std::string, ModelConfig>>& variants) {
  // Variants switch terms off on purpose; only the caller's own choices warrant a warning.
  warn_disabled_weights(config);
  const auto labels = dataset.manifest.labels();
  const auto data = prepare_samples(dataset, config.model);
  std::vector<VariantResult> rows;
  for (const auto& [name, model] : variants) {
    TrainConfig c = config;
    c.model = model;
    rows.push_back({name, model, cross_validate_quiet(data, labels, c, jobs)});
  }
  return rows;
}

std::string cell(const std::optional<MeanStd>& v, bool with_std, double factor = 1.0) {
  if (!v) return "--";
  char buf[64];
  if (with_std)
    std::snprintf(buf, sizeof buf, "%.2f±%.2f", v->mean * factor, v->std * factor);
  else
    std::snprintf(buf, sizeof buf, "%.2f", v->mean * factor);
  return buf;
}

}  // namespace

std::vector<VariantResult> run_ablation(const phantom::Dataset& dataset, const TrainConfig& config, std::size_t jobs) {
  return run_variants(dataset, config, jobs, ablation_variants(config.model));
}

std::vector<VariantResult> run_synergy(const phantom::Dataset& dataset, const TrainConfig& config, std::size_t jobs) {
  return run_variants(dataset, config, jobs, synergy_variants(config.model));
}

std::string ablation_csv(const std::vector<VariantResult>& rows) {
  std::string out = "Variant,DSC,IoU,MAE\n";
  for (const VariantResult& r : rows) {
    const Aggregate& a = r.report.aggregate;
    out += r.name + "," + cell(a.dsc, true) + "," + cell(a.iou, true) + "," + cell(a.mae, true) + "\n";
  }
  return out;
}

std::string synergy_csv(const std::vector<VariantResult>& rows) {
  std::string out = "Configuration,DSC,MAE,Accuracy\n";
  for (const VariantResult& r : rows) {
    const Aggregate& a = r.report.aggregate;
    out += r.name + "," + cell(a.dsc, false) + "," + cell(a.mae, false) + "," + cell(a.accuracy, false, 100.0) + "\n";
  }
  return out;
}

}  // namespace mtinet
