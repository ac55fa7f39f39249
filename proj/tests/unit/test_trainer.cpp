#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "msht/trainer.hpp"
#include "oracles.hpp"

using namespace msht;

namespace {

void expect_metric(const std::optional<double>& got, const std::optional<double>& want, const char* name) {
  ASSERT_EQ(got.has_value(), want.has_value()) << name;
  if (want) EXPECT_NEAR(*got, *want, 1e-12) << name;
}

std::vector<LabeledImage> synthetic_pool(int per_class, std::uint64_t seed) {
  SynthSpec spec;
  spec.per_class = per_class;
  return synth_generate(spec, seed).images;
}

Hyperparams desk_hp(int epochs) {
  Hyperparams hp;
  hp.learning_rate = 1e-3;
  hp.epochs = epochs;
  hp.batch_size = 8;
  hp.augment = false;
  return hp;
}

TrainOptions desk_options() {
  TrainOptions o;
  o.augment = AugmentConfig::desk(64);
  o.augment.rotation_deg = 0.0;
  o.seed = 3;
  return o;
}

void set_head(const Model& m, double w, double b0, double b1) {
  Var weight = m.head().fc.weight;
  Var bias = m.head().fc.bias;
  weight.mutable_value().fill(w);
  bias.mutable_value()[0] = b0;
  bias.mutable_value()[1] = b1;
}

}  // namespace

TEST(Schedule, CosineEndpoints) {
  const Hyperparams hp;
  EXPECT_NEAR(cosine_lr(hp, 0), 6e-5, 1e-9);
  EXPECT_NEAR(cosine_lr(hp, 49), 6e-6, 1e-9);
  EXPECT_NEAR(cosine_lr(hp, 49), 6e-6, 1e-15);
  double prev = cosine_lr(hp, 0);
  for (int e = 1; e < 50; ++e) {
    EXPECT_LT(cosine_lr(hp, e), prev);
    prev = cosine_lr(hp, e);
  }
  EXPECT_THROW(cosine_lr(hp, 50), std::out_of_range);
  Hyperparams one = hp;
  one.epochs = 1;
  EXPECT_DOUBLE_EQ(cosine_lr(one, 0), 6e-5);
}

TEST(Optimizer, SingleAdamWStepByHand) {
  ParameterSet ps;
  Var w = ps.add("w", Tensor({1}, {1.0}));
  Var frozen = ps.add("buffer", Tensor({1}, {2.0}), false);
  Hyperparams hp;
  AdamW opt(ps.entries(), hp);
  ops::sum(ops::scale(w, 0.5)).backward();
  opt.step(0.1);
  const double want = 1.0 * (1.0 - 0.1 * 0.05) - 0.1 * 0.5 / (0.5 + 1e-8);
  EXPECT_NEAR(w.value()[0], want, 1e-15);
  EXPECT_EQ(frozen.value()[0], 2.0);
  EXPECT_EQ(opt.steps(), 1);
  opt.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Metrics, WorkedExample) {
  const MetricsReport m = compute_metrics({90, 95, 5, 10});
  EXPECT_NEAR(*m.sen, 0.9, 1e-12);
  EXPECT_NEAR(*m.spe, 0.95, 1e-12);
  EXPECT_NEAR(*m.acc, 0.925, 1e-12);
  EXPECT_NEAR(*m.ppv, 90.0 / 95.0, 1e-12);
  EXPECT_NEAR(*m.ppv, 0.947368, 1e-6);
  EXPECT_NEAR(*m.npv, 0.904762, 1e-6);
  EXPECT_NEAR(*m.f1, 0.923077, 1e-6);
}

TEST(Metrics, ZeroDenominatorsAreUndefined) {
  const MetricsReport none_pred_pos = compute_metrics({0, 8, 0, 2});
  EXPECT_FALSE(none_pred_pos.ppv);
  EXPECT_FALSE(none_pred_pos.f1);
  EXPECT_NEAR(*none_pred_pos.sen, 0.0, 0.0);
  const MetricsReport no_negatives = compute_metrics({4, 0, 0, 1});
  EXPECT_FALSE(no_negatives.spe);
  EXPECT_FALSE(compute_metrics({}).acc);
}

TEST(Metrics, RandomCountsMatchTheDefinitions) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> d(0, 60);
  for (int i = 0; i < 1000; ++i) {
    const ConfusionCounts c{d(rng), d(rng), d(rng), d(rng)};
    const MetricsReport m = compute_metrics(c);
    const oracle::Metrics o = oracle::metrics(c.tp, c.tn, c.fp, c.fn);
    expect_metric(m.acc, o.acc, "acc");
    expect_metric(m.spe, o.spe, "spe");
    expect_metric(m.sen, o.sen, "sen");
    expect_metric(m.ppv, o.ppv, "ppv");
    expect_metric(m.npv, o.npv, "npv");
    expect_metric(m.f1, o.f1, "f1");
    if (m.sen) EXPECT_NEAR(*m.sen + static_cast<double>(c.fn) / (c.tp + c.fn), 1.0, 1e-12);
    if (m.spe) EXPECT_NEAR(*m.spe + static_cast<double>(c.fp) / (c.tn + c.fp), 1.0, 1e-12);
  }
}

TEST(Metrics, DecisionTiesGoNegative) {
  EXPECT_EQ(decide(0.6, 0.4), Label::positive);
  EXPECT_EQ(decide(0.5, 0.5), Label::negative);
  ConfusionCounts c;
  tally(c, Label::positive, Label::positive);
  tally(c, Label::positive, Label::negative);
  tally(c, Label::negative, Label::positive);
  tally(c, Label::negative, Label::negative);
  tally(c, Label::negative, Label::negative);
  EXPECT_EQ(c.tp, 1);
  EXPECT_EQ(c.fn, 1);
  EXPECT_EQ(c.fp, 1);
  EXPECT_EQ(c.tn, 2);
}

TEST(Aggregate, MeansSkipUndefinedFolds) {
  std::vector<FoldResults> folds(3);
  folds[0].test = compute_metrics({2, 2, 0, 0});  // ppv 1
  folds[1].test = compute_metrics({0, 4, 0, 0});  // ppv undefined
  folds[2].test = compute_metrics({1, 2, 1, 0});  // ppv 0.5
  const AggregateReport a = aggregate_folds(folds);
  EXPECT_EQ(a.folds, 3);
  const auto& ppv = a.test.metrics[3];
  EXPECT_EQ(ppv.excluded, 1);
  EXPECT_NEAR(*ppv.mean, 0.75, 1e-12);
  EXPECT_NEAR(*a.test.metrics[0].mean, (1.0 + 1.0 + 0.75) / 3.0, 1e-12);
  std::vector<FoldResults> all_undefined(2);
  all_undefined[0].test = compute_metrics({0, 3, 0, 0});
  all_undefined[1].test = compute_metrics({0, 1, 0, 0});
  const AggregateReport b = aggregate_folds(all_undefined);
  EXPECT_FALSE(b.test.metrics[3].mean);
  EXPECT_EQ(b.test.metrics[3].excluded, 2);
  EXPECT_THROW(aggregate_folds(std::vector<FoldResults>{}), std::invalid_argument);
}

TEST(Evaluate, ConstantPredictionsGiveKnownCounts) {
  std::vector<LabeledImage> pool;
  for (int i = 0; i < 8; ++i) pool.push_back({RgbImage(64, 64, static_cast<std::uint8_t>(20 * i)),
                                              i < 3 ? Label::positive : Label::negative, "x" + std::to_string(i)});
  const Model m = build_variant(Variant::msht, ModelConfig::tiny(), 1);
  const AugmentConfig cfg = AugmentConfig::desk(64);
  set_head(m, 0.0, 5.0, -5.0);
  ConfusionCounts c = evaluate(m, view_all(pool), cfg, 3);
  EXPECT_EQ(c.tp, 3);
  EXPECT_EQ(c.fp, 5);
  EXPECT_EQ(c.tn + c.fn, 0);
  set_head(m, 0.0, 0.0, 0.0);  // equal confidences everywhere
  c = evaluate(m, view_all(pool), cfg, 3, 2);
  EXPECT_EQ(c.tn, 5);
  EXPECT_EQ(c.fn, 3);
  EXPECT_THROW(evaluate(m, DatasetView{&pool, {}}, cfg), std::invalid_argument);
}

TEST(Views, UnknownIdsAreRejected) {
  const auto pool = synthetic_pool(3, 1);
  EXPECT_EQ(view_of(pool, {"synth_00002", "synth_00000"}).indices, (std::vector<std::size_t>{2, 0}));
  EXPECT_THROW(view_of(pool, {"nope"}), std::invalid_argument);
}

TEST(Batches, WorkerCountDoesNotChangeAugmentedBatches) {
  const auto pool = synthetic_pool(4, 2);
  AugmentConfig cfg = AugmentConfig::desk(64);
  const std::vector<std::size_t> pos{0, 3, 5, 7};
  const std::vector<std::uint64_t> seeds{11, 12, 13, 14};
  const Tensor a = load_batch(view_all(pool), pos, cfg, &seeds, 1);
  const Tensor b = load_batch(view_all(pool), pos, cfg, &seeds, 3);
  EXPECT_EQ(a.shape(), (Shape{4, 3, 64, 64}));
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(TrainFold, KeepsTheBestValidationEpoch) {
  const auto pool = synthetic_pool(16, 5);
  std::vector<std::string> ids;
  std::vector<Label> labels;
  for (const auto& i : pool) {
    ids.push_back(i.source_id);
    labels.push_back(i.label);
  }
  const FoldPlan plan = split_folds(ids, labels, 1);
  const FoldData data = fold_data(pool, plan, 0);
  Model m = build_variant(Variant::msht, ModelConfig::tiny(), 2);
  const auto dir = std::filesystem::temp_directory_path() / "msht_train_fold";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  TrainOptions opt = desk_options();
  opt.checkpoint_path = dir / "best.msht";
  opt.epoch_log_path = dir / "epochs.csv";
  int seen = 0;
  opt.on_epoch = [&](const EpochLog&) { ++seen; };
  const FoldResults r = train_fold(m, data, desk_hp(4), opt);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_EQ(seen, 4);
  double best = -1;
  int first_best = -1;
  for (const auto& e : r.history)
    if (e.val_acc > best) {
      best = e.val_acc;
      first_best = e.epoch;
    }
  EXPECT_EQ(r.best_val_accuracy, best);
  EXPECT_EQ(r.best_epoch, first_best);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  // The restored model reproduces the recorded validation accuracy.
  EXPECT_NEAR(*r.validation.acc, best, 1e-12);
  EXPECT_TRUE(std::filesystem::exists(opt.checkpoint_path));
  std::ifstream log(opt.epoch_log_path);
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,lr,train_loss,train_acc,val_acc");
  std::filesystem::remove_all(dir);
}

TEST(TrainFold, SingleEpochHasOneCandidate) {
  const auto pool = synthetic_pool(8, 6);
  std::vector<std::string> ids;
  for (const auto& i : pool) ids.push_back(i.source_id);
  const FoldData data = fold_data(pool, split_folds(ids, 4), 2);
  Model m = build_variant(Variant::msht, ModelConfig::tiny(), 3);
  const FoldResults r = train_fold(m, data, desk_hp(1), desk_options());
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, r.history[0].epoch);
}

TEST(TrainFold, NonFiniteLossAborts) {
  const auto pool = synthetic_pool(8, 7);
  std::vector<std::string> ids;
  for (const auto& i : pool) ids.push_back(i.source_id);
  const FoldData data = fold_data(pool, split_folds(ids, 4), 0);
  Model m = build_variant(Variant::msht, ModelConfig::tiny(), 4);
  Var w = m.head().fc.weight;
  w.mutable_value()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_fold(m, data, desk_hp(2), desk_options());
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos);
  }
}

TEST(TrainFold, InputEdgeMustMatchTheModel) {
  const auto pool = synthetic_pool(8, 8);
  std::vector<std::string> ids;
  for (const auto& i : pool) ids.push_back(i.source_id);
  const FoldData data = fold_data(pool, split_folds(ids, 4), 0);
  Model m = build_variant(Variant::msht, ModelConfig::tiny(), 4);
  TrainOptions opt = desk_options();
  opt.augment.resize_edge = 32;
  EXPECT_THROW(train_fold(m, data, desk_hp(1), opt), ShapeError);
}

TEST(Experiment, DeterministicForAFixedSeed) {
  const auto pool = synthetic_pool(8, 9);
  ExperimentOptions o;
  o.base = ModelConfig::tiny();
  o.hp = desk_hp(1);
  o.augment = desk_options().augment;
  o.seed = 17;
  o.folds = 1;
  const ExperimentReport a = run_experiment(pool, o);
  o.workers = 2;
  const ExperimentReport b = run_experiment(pool, o);
  ASSERT_EQ(a.per_fold.size(), 1u);
  EXPECT_EQ(a.per_fold[0].best_archive.serialize(), b.per_fold[0].best_archive.serialize());
  EXPECT_EQ(a.json, b.json);
}

TEST(Experiment, RunsAllFoldsAndWritesTheReport) {
  const auto pool = synthetic_pool(8, 10);
  const auto dir = std::filesystem::temp_directory_path() / "msht_experiment";
  std::filesystem::remove_all(dir);
  ExperimentOptions o;
  o.base = ModelConfig::tiny();
  o.hp = desk_hp(1);
  o.augment = desk_options().augment;
  o.output_dir = dir;
  const ExperimentReport r = run_experiment(pool, o);
  EXPECT_EQ(r.per_fold.size(), 5u);
  EXPECT_EQ(r.aggregate.folds, 5);
  EXPECT_EQ(r.plan.test_ids.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  for (int k = 1; k <= 5; ++k) {
    EXPECT_TRUE(std::filesystem::exists(dir / ("fold" + std::to_string(k)) / "best.msht"));
    EXPECT_TRUE(std::filesystem::exists(dir / ("fold" + std::to_string(k)) / "epochs.csv"));
  }
  std::filesystem::remove_all(dir);
}

TEST(Experiment, UnknownVariantFailsBeforeTraining) {
  ExperimentOptions o;
  o.variant = "Hybrid7";
  o.base = ModelConfig::tiny();
  EXPECT_THROW(run_experiment(synthetic_pool(8, 1), o), std::invalid_argument);
}

TEST(Hyperparams, Validation) {
  Hyperparams hp;
  EXPECT_NO_THROW(hp.validate());
  hp.epochs = 0;
  EXPECT_THROW(hp.validate(), std::invalid_argument);
  hp = {};
  hp.learning_rate = -1;
  EXPECT_THROW(hp.validate(), std::invalid_argument);
}

TEST(Baseline, HistogramsCannotSeeTheArrangement) {
  const auto pool = synthetic_pool(128, 21);
  DatasetView train{&pool, {}}, test{&pool, {}};
  for (std::size_t i = 0; i < pool.size(); ++i) (i < 192 ? train : test).indices.push_back(i);
  const HistogramBaseline b = HistogramBaseline::fit(train);
  const MetricsReport m = compute_metrics(b.evaluate(test));
  EXPECT_LE(*m.acc, 0.60);
  const double p = b.positive_probability(pool[0].image);
  EXPECT_GE(p, 0.0);
  EXPECT_LE(p, 1.0);
}
