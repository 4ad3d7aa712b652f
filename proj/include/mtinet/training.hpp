#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtinet/losses.hpp"
#include "mtinet/model.hpp"
#include "mtinet/optim.hpp"
#include "mtinet/phantom.hpp"

namespace mtinet {

struct TrainConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-4;
  double disc_learning_rate = 0.0;  // 0 selects learning_rate
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  double test_fraction = 0.2;  // single-split training
  LossWeights weights{};
  ModelConfig model{};

  void validate() const;
  double discriminator_lr() const { return disc_learning_rate > 0.0 ? disc_learning_rate : learning_rate; }
};

/// A sample with its encoder inputs precomputed.
struct PreparedSample {
  PreparedInput input;
  Tensor mask;
  Tensor enhancement;
  int label = 0;
};
std::vector<PreparedSample> prepare_samples(const phantom::Dataset& dataset, const ModelConfig& config);

struct TrainingState {
  Generator generator;
  Discriminator discriminator;
  AdamState generator_opt;
  AdamState discriminator_opt;

  TrainingState(const TrainConfig& config, std::uint64_t seed);
};

/// Loss values of one step; absent terms were not evaluated.
struct StepLosses {
  std::map<std::string, double> terms;  // seg, reg, cls, tim, adv, disc, total
};

/// One optimization step on `batch`. With the discriminator active it first
/// updates the discriminator on detached generator outputs, then the generator.
/// Starts the regression head at the mean target of `indices`. Without it the
/// first epochs push every sample's output the same way and the trunk features
/// collapse before they separate the classes.
void init_regression_bias(Generator& generator, const std::vector<PreparedSample>& data,
                          const std::vector<std::size_t>& indices);

StepLosses train_step(TrainingState& state, std::span<const PreparedSample* const> batch, const TrainConfig& config);

struct SamplePrediction {
  std::size_t index = 0;
  Tensor seg_prob;  // empty when segmentation is off
  Tensor reg;
  Tensor cls_prob;
};

struct EvalReport {
  std::size_t samples = 0;
  std::optional<MeanStd> dsc, iou, mae;
  std::optional<double> accuracy;
  std::optional<ConfusionMatrix> confusion;
  std::vector<SamplePrediction> predictions;
};

/// Inference-mode evaluation of `indices`.
EvalReport evaluate(const Generator& generator, const std::vector<PreparedSample>& data,
                    const std::vector<std::size_t>& indices);

struct FoldReport {
  std::size_t fold = 0;
  std::size_t train_size = 0;
  std::size_t steps = 0;
  std::map<std::string, std::vector<double>> traces;  // per-epoch mean of each term
  EvalReport test;
  double seconds = 0.0;
};

/// Trains on fold.train for config.epochs and evaluates on fold.test. The
/// trained state is handed back through `state_out` when given.
FoldReport run_fold(const std::vector<PreparedSample>& data, const phantom::Fold& fold, std::size_t fold_index,
                    const TrainConfig& config, std::optional<TrainingState>* state_out = nullptr);

struct Aggregate {
  std::optional<MeanStd> dsc, iou, mae, accuracy;
};

struct CrossValReport {
  std::vector<FoldReport> folds;
  Aggregate aggregate;  // mean and population std of the per-fold means
};

Aggregate aggregate_folds(const std::vector<FoldReport>& folds);
/// Folds run on up to `jobs` threads; results do not depend on `jobs`.
CrossValReport cross_validate(const std::vector<PreparedSample>& data, const std::vector<int>& labels,
                              const TrainConfig& config, std::size_t jobs = 1);

struct VariantResult {
  std::string name;
  ModelConfig model;
  CrossValReport report;
};

std::vector<std::pair<std::string, ModelConfig>> ablation_variants(const ModelConfig& base);
std::vector<std::pair<std::string, ModelConfig>> synergy_variants(const ModelConfig& base);
std::vector<VariantResult> run_ablation(const phantom::Dataset& dataset, const TrainConfig& config, std::size_t jobs = 1);
std::vector<VariantResult> run_synergy(const phantom::Dataset& dataset, const TrainConfig& config, std::size_t jobs = 1);

/// Comma-separated tables mirroring the published row and column sets.
std::string ablation_csv(const std::vector<VariantResult>& rows);
std::string synergy_csv(const std::vector<VariantResult>& rows);

// ---- persistence ----

/// Writes `<path>` (JSON manifest) and `<path>.bin` (float32 blob).
void save_checkpoint(const std::filesystem::path& path, const TrainingState& state, const TrainConfig& config);

struct LoadedCheckpoint {
  TrainConfig config;
  std::optional<TrainingState> state;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---- reports ----

using Json = nlohmann::ordered_json;

Json config_to_json(const TrainConfig& config);
/// Applies a config document on top of `base`. Unknown keys are a
/// ConfigError; a top-level "phantom" object is left to the caller.
TrainConfig config_from_json(const Json& doc, TrainConfig base = {});

// Wall-clock times are left out so that equal seeds give equal documents.
Json eval_report_json(const EvalReport& report);
Json fold_report_json(const FoldReport& report);
Json crossval_report_json(const CrossValReport& report, const TrainConfig& config);
Json variants_report_json(const std::vector<VariantResult>& rows, const TrainConfig& config);

}  // namespace mtinet
