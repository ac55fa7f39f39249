#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msht/datapipe.hpp"
#include "msht/model.hpp"

namespace msht {

struct Hyperparams {
  double learning_rate = 6e-5;
  double final_lr_ratio = 0.1;  // cosine decay ends at learning_rate * final_lr_ratio
  double weight_decay = 0.05;   // decoupled
  int epochs = 50;
  int batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool class_weighting = false;  // inverse-frequency loss weights
  bool augment = true;
  int eval_batch_size = 16;

  void validate() const;
};

/// Cosine annealing over epochs: epoch 0 gives learning_rate, the last epoch
/// learning_rate * final_lr_ratio.
double cosine_lr(const Hyperparams& hp, int epoch);

/// Adam with decoupled weight decay over the trainable parameters.
class AdamW {
 public:
  AdamW(std::vector<Parameter> params, const Hyperparams& hp);
  /// Updates every parameter that holds a gradient.
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return steps_; }

 private:
  std::vector<Parameter> params_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, epsilon_, weight_decay_;
  std::int64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics

struct ConfusionCounts {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::int64_t total() const { return tp + tn + fp + fn; }
};

inline constexpr int kMetricCount = 6;
inline constexpr std::array<const char*, kMetricCount> kMetricNames{"acc", "spe", "sen",
                                                                    "ppv", "npv", "f1"};

/// std::nullopt marks a metric whose denominator is zero.
struct MetricsReport {
  std::optional<double> acc, spe, sen, ppv, npv, f1;

  std::array<std::optional<double>, kMetricCount> values() const {
    return {acc, spe, sen, ppv, npv, f1};
  }
};

MetricsReport compute_metrics(const ConfusionCounts& counts);

/// Positive iff the positive-class confidence is strictly larger.
Label decide(double positive_confidence, double negative_confidence);
void tally(ConfusionCounts& counts, Label truth, Label predicted);

// ---------------------------------------------------------------------------
// Data views

/// Index subset of an image pool; the pool must outlive the view.
struct DatasetView {
  const std::vector<LabeledImage>* pool = nullptr;
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  const LabeledImage& operator[](std::size_t i) const { return (*pool)[indices[i]]; }
};

DatasetView view_of(const std::vector<LabeledImage>& pool, const std::vector<std::string>& ids);
DatasetView view_all(const std::vector<LabeledImage>& pool);

struct FoldData {
  DatasetView train, validation, test;
};

FoldData fold_data(const std::vector<LabeledImage>& pool, const FoldPlan& plan, int fold);

/// Batch of preprocessed images; with seeds, each sample is augmented from
/// its own generator so results do not depend on the worker count.
Tensor load_batch(const DatasetView& data, std::span<const std::size_t> positions,
                  const AugmentConfig& cfg, const std::vector<std::uint64_t>* seeds, int workers);

ConfusionCounts evaluate(const Model& model, const DatasetView& data, const AugmentConfig& cfg,
                         int batch_size = 16, int workers = 1);

// ---------------------------------------------------------------------------
// Training

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;  // running accuracy over the epoch's training batches
  double val_acc = 0.0;
};

struct FoldResults {
  int fold = 0;  // 1-based
  int best_epoch = -1;
  double best_val_accuracy = 0.0;
  MetricsReport train, validation, test;
  ConfusionCounts test_counts;
  std::string checkpoint;  // file path, empty when kept in memory only
  ParameterArchive best_archive;
  std::vector<EpochLog> history;
};

struct TrainOptions {
  AugmentConfig augment;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_path;  // optional
  std::filesystem::path epoch_log_path;   // optional CSV
  int workers = 1;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Trains in place. The best-validation parameters are restored into the
/// model before returning.
FoldResults train_fold(Model& model, const FoldData& data, const Hyperparams& hp,
                       const TrainOptions& options);

void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochLog>& history);

// ---------------------------------------------------------------------------
// Aggregation and experiments

struct MetricSummary {
  std::optional<double> mean;
  int excluded = 0;  // folds whose value was undefined
};

struct SplitSummary {
  std::array<MetricSummary, kMetricCount> metrics;
};

struct AggregateReport {
  SplitSummary train, validation, test;
  int folds = 0;
};

AggregateReport aggregate_folds(std::span<const FoldResults> results);

struct ExperimentOptions {
  std::string variant = "MSHT";
  ModelConfig base = ModelConfig::full();
  Hyperparams hp;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;  // report.json, fold*/epochs.csv, fold*/best.msht
  int workers = 1;
  int folds = kFoldCount;  // run the first `folds` folds
  std::function<void(int fold, const EpochLog&)> on_epoch;
};

struct ExperimentReport {
  std::string variant;
  std::uint64_t seed = 0;
  FoldPlan plan;
  std::vector<FoldResults> per_fold;
  AggregateReport aggregate;
  std::string json;
};

/// Splits, trains each fold, aggregates and writes report.json when an
/// output directory is set. The variant name is validated first.
ExperimentReport run_experiment(const std::vector<LabeledImage>& pool,
                                const ExperimentOptions& options);

std::string metrics_json(const MetricsReport& m);

/// Comparison table with header Variant,Acc,Spe,Sen,PPV,NPV,F1: mean test
/// metrics in percent with two decimals, "NA" where undefined.
std::string ablation_csv(std::span<const ExperimentReport> reports);
std::string hyperparams_json(const Hyperparams& hp);

// ---------------------------------------------------------------------------
// Baseline

/// Logistic regression on grayscale intensity histograms.
class HistogramBaseline {
 public:
  static HistogramBaseline fit(const DatasetView& train, int bins = 32, int iterations = 2000,
                               double lr = 0.5, double l2 = 1e-3);
  double positive_probability(const RgbImage& image) const;
  Label predict(const RgbImage& image) const;
  ConfusionCounts evaluate(const DatasetView& data) const;

 private:
  int bins_ = 32;
  std::vector<double> mean_, scale_, weights_;
  double bias_ = 0.0;
};

}  // namespace msht
