#include "msht/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "msht/seed.hpp"

namespace msht {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

ojson optional_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

ojson metrics_to_json(const MetricsReport& m) {
  ojson j;
  const auto vals = m.values();
  for (int i = 0; i < kMetricCount; ++i) j[kMetricNames[static_cast<std::size_t>(i)]] = optional_json(vals[static_cast<std::size_t>(i)]);
  return j;
}

ojson hyperparams_to_json(const Hyperparams& hp) {
  return ojson{{"learning_rate", hp.learning_rate}, {"final_lr_ratio", hp.final_lr_ratio},
               {"weight_decay", hp.weight_decay},   {"epochs", hp.epochs},
               {"batch_size", hp.batch_size},       {"beta1", hp.beta1},
               {"beta2", hp.beta2},                 {"epsilon", hp.epsilon},
               {"class_weighting", hp.class_weighting}, {"augment", hp.augment},
               {"eval_batch_size", hp.eval_batch_size}};
}

ojson split_to_json(const SplitSummary& s) {
  ojson j;
  for (int i = 0; i < kMetricCount; ++i) {
    const auto& m = s.metrics[static_cast<std::size_t>(i)];
    j[kMetricNames[static_cast<std::size_t>(i)]] = {{"mean", optional_json(m.mean)},
                                                     {"excluded", m.excluded}};
  }
  return j;
}

std::optional<double> ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::vector<int> labels_of(const DatasetView& data, std::span<const std::size_t> positions) {
  std::vector<int> labels;
  labels.reserve(positions.size());
  for (auto p : positions) labels.push_back(class_index(data[p].label));
  return labels;
}

}  // namespace

void Hyperparams::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1 || eval_batch_size < 1) throw std::invalid_argument("batch sizes must be positive");
  if (!(final_lr_ratio > 0) || final_lr_ratio > 1) throw std::invalid_argument("final_lr_ratio must lie in (0, 1]");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be non-negative");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw std::invalid_argument("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
}

double cosine_lr(const Hyperparams& hp, int epoch) {
  if (epoch < 0 || epoch >= hp.epochs) throw std::out_of_range("epoch outside the schedule");
  if (hp.epochs == 1) return hp.learning_rate;
  const double lo = hp.learning_rate * hp.final_lr_ratio;
  const double t = static_cast<double>(epoch) / (hp.epochs - 1);
  return lo + 0.5 * (hp.learning_rate - lo) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<Parameter> params, const Hyperparams& hp)
    : beta1_(hp.beta1), beta2_(hp.beta2), epsilon_(hp.epsilon), weight_decay_(hp.weight_decay) {
  for (auto& p : params) {
    if (!p.trainable) continue;
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
    params_.push_back(std::move(p));
  }
}

void AdamW::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& var = params_[i].var;
    if (!var.has_grad()) continue;
    const Tensor& g = var.grad();
    Tensor& w = var.mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const double decay = 1.0 - lr * weight_decay_;
    for (std::int64_t k = 0; k < w.numel(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] = w[k] * decay - lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + epsilon_);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

MetricsReport compute_metrics(const ConfusionCounts& c) {
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0) {
    throw std::invalid_argument("confusion counts must be non-negative");
  }
  MetricsReport r;
  r.acc = ratio(c.tp + c.tn, c.total());
  r.sen = ratio(c.tp, c.tp + c.fn);
  r.spe = ratio(c.tn, c.tn + c.fp);
  r.ppv = ratio(c.tp, c.tp + c.fp);
  r.npv = ratio(c.tn, c.tn + c.fn);
  if (r.ppv && r.sen && *r.ppv + *r.sen > 0) r.f1 = 2.0 * *r.ppv * *r.sen / (*r.ppv + *r.sen);
  return r;
}

Label decide(double positive_confidence, double negative_confidence) {
  return positive_confidence > negative_confidence ? Label::positive : Label::negative;
}

void tally(ConfusionCounts& c, Label truth, Label predicted) {
  if (truth == Label::positive) {
    (predicted == Label::positive ? c.tp : c.fn) += 1;
  } else {
    (predicted == Label::negative ? c.tn : c.fp) += 1;
  }
}

DatasetView view_of(const std::vector<LabeledImage>& pool, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < pool.size(); ++i) index.emplace(pool[i].source_id, i);
  DatasetView v{&pool, {}};
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw std::invalid_argument("unknown sample id '" + id + "'");
    v.indices.push_back(it->second);
  }
  return v;
}

DatasetView view_all(const std::vector<LabeledImage>& pool) {
  DatasetView v{&pool, {}};
  for (std::size_t i = 0; i < pool.size(); ++i) v.indices.push_back(i);
  return v;
}

FoldData fold_data(const std::vector<LabeledImage>& pool, const FoldPlan& plan, int fold) {
  return {view_of(pool, plan.train_ids(fold)), view_of(pool, plan.validation_ids(fold)),
          view_of(pool, plan.test_ids)};
}

Tensor load_batch(const DatasetView& data, std::span<const std::size_t> positions,
                  const AugmentConfig& cfg, const std::vector<std::uint64_t>* seeds, int workers) {
  std::vector<Tensor> items(positions.size());
  parallel_for(positions.size(), workers, [&](std::size_t i) {
    const RgbImage& img = data[positions[i]].image;
    if (seeds) {
      std::mt19937_64 rng((*seeds)[i]);
      items[i] = augment_train(img, cfg, rng);
    } else {
      items[i] = preprocess_eval(img, cfg);
    }
  });
  return stack_batch(items);
}

ConfusionCounts evaluate(const Model& model, const DatasetView& data, const AugmentConfig& cfg,
                         int batch_size, int workers) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  ConfusionCounts counts;
  std::vector<std::size_t> positions(data.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  for (std::size_t start = 0; start < positions.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(positions.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const std::size_t> chunk(positions.data() + start, end - start);
    const Tensor conf = model.predict(load_batch(data, chunk, cfg, nullptr, workers));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto b = static_cast<std::int64_t>(i);
      tally(counts, data[chunk[i]].label, decide(conf[b * 2], conf[b * 2 + 1]));
    }
  }
  return counts;
}

void write_epoch_log(const fs::path& path, const std::vector<EpochLog>& history) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,train_loss,train_acc,val_acc\n";
  out.precision(10);
  for (const auto& e : history) {
    out << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_acc
        << '\n';
  }
}

FoldResults train_fold(Model& model, const FoldData& data, const Hyperparams& hp,
                       const TrainOptions& options) {
  hp.validate();
  options.augment.validate();
  if (data.train.size() == 0 || data.validation.size() == 0) {
    throw std::invalid_argument("train_fold: empty training or validation set");
  }
  const int edge = model.config().backbone.input_edge;
  if (options.augment.resize_edge != edge) {
    throw ShapeError("preprocessing produces " + std::to_string(options.augment.resize_edge) +
                     "-pixel inputs but the model expects " + std::to_string(edge));
  }

  std::vector<double> class_weights;
  if (hp.class_weighting) {
    std::array<double, 2> n{0, 0};
    for (std::size_t i = 0; i < data.train.size(); ++i) n[static_cast<std::size_t>(class_index(data.train[i].label))] += 1;
    const double total = n[0] + n[1];
    for (double c : n) class_weights.push_back(c > 0 ? total / (2.0 * c) : 0.0);
  }

  std::mt19937_64 rng(options.seed);
  AdamW optimizer(model.parameters(), hp);
  FoldResults result;

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = cosine_lr(hp, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      std::span<const std::size_t> chunk(order.data() + start, end - start);
      std::vector<std::uint64_t> seeds(chunk.size());
      for (auto& s : seeds) s = rng();
      const Tensor images =
          load_batch(data.train, chunk, options.augment, hp.augment ? &seeds : nullptr, options.workers);
      const std::vector<int> labels = labels_of(data.train, chunk);

      optimizer.zero_grad();
      ForwardContext ctx{true, &rng};
      const Var logits = model.logits(Var(images), ctx);
      Var loss = ops::cross_entropy(logits, labels, class_weights);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));
      }
      loss.backward();
      optimizer.step(log.lr);

      loss_sum += lv * static_cast<double>(chunk.size());
      const Tensor& z = logits.value();
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        const auto b = static_cast<std::int64_t>(i);
        if (class_index(decide(z[b * 2], z[b * 2 + 1])) == labels[i]) ++correct;
      }
    }
    optimizer.zero_grad();
    log.train_loss = loss_sum / static_cast<double>(order.size());
    log.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    const ConfusionCounts val = evaluate(model, data.validation, options.augment, hp.eval_batch_size, options.workers);
    log.val_acc = *compute_metrics(val).acc;

    if (result.best_epoch < 0 || log.val_acc > result.best_val_accuracy) {
      result.best_epoch = epoch;
      result.best_val_accuracy = log.val_acc;
      result.best_archive = checkpoint_archive(model);
      result.best_archive.set_metadata("best_epoch", std::to_string(epoch));
      if (!options.checkpoint_path.empty()) {
        if (options.checkpoint_path.has_parent_path()) fs::create_directories(options.checkpoint_path.parent_path());
        result.best_archive.save(options.checkpoint_path);
        result.checkpoint = options.checkpoint_path.string();
      }
    }
    result.history.push_back(log);
    if (!options.epoch_log_path.empty()) write_epoch_log(options.epoch_log_path, result.history);
    if (options.on_epoch) options.on_epoch(log);
  }

  restore_checkpoint(model, result.best_archive);
  result.train = compute_metrics(evaluate(model, data.train, options.augment, hp.eval_batch_size, options.workers));
  result.validation = compute_metrics(evaluate(model, data.validation, options.augment, hp.eval_batch_size, options.workers));
  if (data.test.size() > 0) {
    result.test_counts = evaluate(model, data.test, options.augment, hp.eval_batch_size, options.workers);
    result.test = compute_metrics(result.test_counts);
  }
  return result;
}

AggregateReport aggregate_folds(std::span<const FoldResults> results) {
  if (results.empty()) throw std::invalid_argument("aggregate_folds: no fold results");
  AggregateReport agg;
  agg.folds = static_cast<int>(results.size());
  auto summarize = [&](auto pick) {
    SplitSummary s;
    for (int m = 0; m < kMetricCount; ++m) {
      double sum = 0.0;
      int n = 0;
      auto& out = s.metrics[static_cast<std::size_t>(m)];
      for (const auto& r : results) {
        const auto v = pick(r).values()[static_cast<std::size_t>(m)];
        if (v) {
          sum += *v;
          ++n;
        } else {
          ++out.excluded;
        }
      }
      if (n > 0) out.mean = sum / n;
    }
    return s;
  };
  agg.train = summarize([](const FoldResults& r) -> const MetricsReport& { return r.train; });
  agg.validation = summarize([](const FoldResults& r) -> const MetricsReport& { return r.validation; });
  agg.test = summarize([](const FoldResults& r) -> const MetricsReport& { return r.test; });
  return agg;
}

std::string ablation_csv(std::span<const ExperimentReport> reports) {
  std::string csv = "Variant,Acc,Spe,Sen,PPV,NPV,F1\n";
  for (const auto& r : reports) {
    csv += r.variant;
    for (const auto& m : r.aggregate.test.metrics) {
      if (!m.mean) {
        csv += ",NA";
        continue;
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.2f", 100.0 * *m.mean);
      csv += buf;
    }
    csv += "\n";
  }
  return csv;
}

std::string metrics_json(const MetricsReport& m) { return metrics_to_json(m).dump(); }

std::string hyperparams_json(const Hyperparams& hp) { return hyperparams_to_json(hp).dump(); }

ExperimentReport run_experiment(const std::vector<LabeledImage>& pool, const ExperimentOptions& opt) {
  const Variant variant = parse_variant(opt.variant);
  opt.hp.validate();
  opt.augment.validate();
  if (opt.folds < 1 || opt.folds > kFoldCount) throw std::invalid_argument("folds must lie in [1, 5]");
  // Builds once so configuration errors surface before any training.
  (void)build_variant(variant, opt.base, opt.seed);

  std::vector<std::string> ids;
  std::vector<Label> labels;
  for (const auto& img : pool) {
    ids.push_back(img.source_id);
    labels.push_back(img.label);
  }
  ExperimentReport report;
  report.variant = to_string(variant);
  report.seed = opt.seed;
  report.plan = split_folds(ids, labels, derive_seed(opt.seed, 0));

  for (int k = 0; k < opt.folds; ++k) {
    Model model = build_variant(variant, opt.base, derive_seed(opt.seed, 100 + static_cast<std::uint64_t>(k)));
    TrainOptions to;
    to.augment = opt.augment;
    to.seed = derive_seed(opt.seed, 200 + static_cast<std::uint64_t>(k));
    to.workers = opt.workers;
    if (!opt.output_dir.empty()) {
      const fs::path dir = opt.output_dir / ("fold" + std::to_string(k + 1));
      to.checkpoint_path = dir / "best.msht";
      to.epoch_log_path = dir / "epochs.csv";
    }
    if (opt.on_epoch) to.on_epoch = [&, k](const EpochLog& e) { opt.on_epoch(k + 1, e); };
    FoldResults r = train_fold(model, fold_data(pool, report.plan, k), opt.hp, to);
    r.fold = k + 1;
    report.per_fold.push_back(std::move(r));
  }
  report.aggregate = aggregate_folds(report.per_fold);

  ojson j;
  j["variant"] = report.variant;
  j["seed"] = opt.seed;
  j["hyperparams"] = hyperparams_to_json(opt.hp);
  j["model_config"] = ojson::parse(variant_config(variant, opt.base).to_json());
  j["samples"] = {{"total", pool.size()},
                  {"test", report.plan.test_ids.size()},
                  {"folds", {report.plan.fold_ids[0].size(), report.plan.fold_ids[1].size(),
                             report.plan.fold_ids[2].size(), report.plan.fold_ids[3].size(),
                             report.plan.fold_ids[4].size()}}};
  j["per_fold"] = ojson::array();
  for (const auto& r : report.per_fold) {
    ojson f;
    f["fold"] = r.fold;
    f["best_epoch"] = r.best_epoch;
    f["best_val_accuracy"] = r.best_val_accuracy;
    f["checkpoint"] = r.checkpoint.empty() ? ojson(nullptr)
                                           : ojson(fs::relative(r.checkpoint, opt.output_dir).generic_string());
    f["train"] = metrics_to_json(r.train);
    f["validate"] = metrics_to_json(r.validation);
    f["test"] = metrics_to_json(r.test);
    f["test_counts"] = {{"tp", r.test_counts.tp}, {"tn", r.test_counts.tn},
                        {"fp", r.test_counts.fp}, {"fn", r.test_counts.fn}};
    j["per_fold"].push_back(f);
  }
  j["aggregate"] = {{"folds", report.aggregate.folds},
                    {"train", split_to_json(report.aggregate.train)},
                    {"validate", split_to_json(report.aggregate.validation)},
                    {"test", split_to_json(report.aggregate.test)}};
  report.json = j.dump(2);
  if (!opt.output_dir.empty()) {
    fs::create_directories(opt.output_dir);
    std::ofstream out(opt.output_dir / "report.json");
    if (!out) throw std::runtime_error("cannot write report under " + opt.output_dir.string());
    out << report.json << '\n';
  }
  return report;
}

HistogramBaseline HistogramBaseline::fit(const DatasetView& train, int bins, int iterations,
                                         double lr, double l2) {
  if (train.size() == 0) throw std::invalid_argument("baseline: empty training set");
  HistogramBaseline b;
  b.bins_ = bins;
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (std::size_t i = 0; i < train.size(); ++i) {
    x.push_back(intensity_histogram(train[i].image, bins));
    y.push_back(train[i].label == Label::positive ? 1.0 : 0.0);
  }
  const double n = static_cast<double>(x.size());
  b.mean_.assign(nb, 0.0);
  b.scale_.assign(nb, 0.0);
  for (const auto& r : x) for (std::size_t k = 0; k < nb; ++k) b.mean_[k] += r[k] / n;
  for (const auto& r : x) for (std::size_t k = 0; k < nb; ++k) b.scale_[k] += (r[k] - b.mean_[k]) * (r[k] - b.mean_[k]) / n;
  for (auto& s : b.scale_) s = s > 1e-12 ? 1.0 / std::sqrt(s) : 0.0;
  for (auto& r : x) for (std::size_t k = 0; k < nb; ++k) r[k] = (r[k] - b.mean_[k]) * b.scale_[k];

  b.weights_.assign(nb, 0.0);
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> gw(nb, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double z = b.bias_;
      for (std::size_t k = 0; k < nb; ++k) z += b.weights_[k] * x[i][k];
      const double err = 1.0 / (1.0 + std::exp(-z)) - y[i];
      for (std::size_t k = 0; k < nb; ++k) gw[k] += err * x[i][k] / n;
      gb += err / n;
    }
    for (std::size_t k = 0; k < nb; ++k) b.weights_[k] -= lr * (gw[k] + l2 * b.weights_[k]);
    b.bias_ -= lr * gb;
  }
  return b;
}

double HistogramBaseline::positive_probability(const RgbImage& image) const {
  const auto h = intensity_histogram(image, bins_);
  double z = bias_;
  for (std::size_t k = 0; k < h.size(); ++k) z += weights_[k] * (h[k] - mean_[k]) * scale_[k];
  return 1.0 / (1.0 + std::exp(-z));
}

Label HistogramBaseline::predict(const RgbImage& image) const {
  const double p = positive_probability(image);
  return decide(p, 1.0 - p);
}

ConfusionCounts HistogramBaseline::evaluate(const DatasetView& data) const {
  ConfusionCounts c;
  for (std::size_t i = 0; i < data.size(); ++i) tally(c, data[i].label, predict(data[i].image));
  return c;
}

}  // namespace msht
