#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "msht/explain.hpp"
#include "msht/seed.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace msht;
using namespace msht::cli;

namespace {

struct Pool {
  std::vector<LabeledImage> images;
  std::vector<std::vector<std::uint8_t>> masks;  // synthetic only
};

Pool load_pool(const RunConfig& c) {
  Pool p;
  if (c.data.empty()) {
    SynthDataset ds = synth_generate(c.synth, c.seed);
    p.images = std::move(ds.images);
    p.masks = std::move(ds.masks);
    return p;
  }
  IngestResult r = ingest_directory(c.data, c.ingest);
  for (const auto& w : r.warnings) std::cerr << "warning: skipped " << w.path << ": " << w.reason << '\n';
  p.images = std::move(r.images);
  return p;
}

FoldPlan plan_for(const std::vector<LabeledImage>& images, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::vector<Label> labels;
  for (const auto& img : images) {
    ids.push_back(img.source_id);
    labels.push_back(img.label);
  }
  return split_folds(ids, labels, derive_seed(seed, 0));
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string safe_name(std::string id) {
  for (char& ch : id) {
    if (ch == '/' || ch == '\\' || ch == ':') ch = '_';
  }
  return id;
}

ExperimentOptions experiment_options(const RunConfig& c, const std::string& variant,
                                     const fs::path& out) {
  ExperimentOptions o;
  o.variant = variant;
  o.base = c.base;
  o.hp = c.hp;
  o.augment = c.augment;
  o.seed = c.seed;
  o.output_dir = out;
  o.workers = c.workers;
  o.folds = c.folds;
  o.on_epoch = [variant](int fold, const EpochLog& e) {
    std::printf("[%s] fold %d epoch %d lr %.3g loss %.4f train_acc %.4f val_acc %.4f\n",
                variant.c_str(), fold, e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc);
    std::fflush(stdout);
  };
  return o;
}

int cmd_synth(const RunConfig& c) {
  SynthDataset ds = synth_generate(c.synth, c.seed);
  const FoldPlan plan = plan_for(ds.images, c.seed);
  write_dataset(c.output_dir, ds.images, &plan);
  std::printf("wrote %zu images and manifest.csv to %s\n", ds.images.size(), c.output_dir.c_str());
  return 0;
}

int cmd_train(const RunConfig& c) {
  const Pool pool = load_pool(c);
  write_text(c.output_dir / "run_config.txt", to_config_text(c.settings));
  const ExperimentReport r = run_experiment(pool.images, experiment_options(c, c.variant, c.output_dir));
  const auto& acc = r.aggregate.test.metrics[0].mean;
  std::printf("report: %s\n", (c.output_dir / "report.json").c_str());
  if (acc) std::printf("mean test accuracy over %d folds: %.4f\n", r.aggregate.folds, *acc);
  return 0;
}

DatasetView select_split(const RunConfig& c, const Pool& pool) {
  if (c.split == "all") return view_all(pool.images);
  const fs::path manifest = c.data.empty() ? fs::path() : fs::path(c.data) / "manifest.csv";
  std::vector<std::string> ids;
  if (!manifest.empty() && fs::exists(manifest)) {
    for (const auto& row : read_manifest(manifest)) {
      if (row.fold == c.split) ids.push_back(row.id);
    }
  } else {
    const FoldPlan plan = plan_for(pool.images, c.seed);
    if (c.split == "test") {
      ids = plan.test_ids;
    } else if (c.split.size() == 1 && c.split[0] >= '1' && c.split[0] <= '5') {
      ids = plan.validation_ids(c.split[0] - '1');
    } else {
      throw UsageError("split must be all, test or 1-5");
    }
  }
  if (ids.empty()) throw UsageError("split '" + c.split + "' selects no samples");
  return view_of(pool.images, ids);
}

int cmd_eval(RunConfig c) {
  if (c.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  const Model model = load_checkpoint(c.checkpoint);
  c.augment.resize_edge = model.config().backbone.input_edge;
  const Pool pool = load_pool(c);
  const DatasetView data = select_split(c, pool);
  const ConfusionCounts counts = evaluate(model, data, c.augment, c.hp.eval_batch_size, c.workers);
  nlohmann::ordered_json j;
  j["checkpoint"] = c.checkpoint.string();
  j["variant"] = to_string(model.variant());
  j["split"] = c.split;
  j["samples"] = data.size();
  j["counts"] = {{"tp", counts.tp}, {"tn", counts.tn}, {"fp", counts.fp}, {"fn", counts.fn}};
  j["metrics"] = nlohmann::ordered_json::parse(metrics_json(compute_metrics(counts)));
  const std::string text = j.dump(2);
  write_text(c.output_dir / "eval.json", text + "\n");
  std::cout << text << '\n';
  return 0;
}

int cmd_cam(RunConfig c) {
  if (c.checkpoint.empty()) throw UsageError("cam needs --checkpoint");
  if (c.ids.empty()) throw UsageError("cam needs --ids");
  const Model model = load_checkpoint(c.checkpoint);
  c.augment.resize_edge = model.config().backbone.input_edge;
  const Pool pool = load_pool(c);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < pool.images.size(); ++i) index.emplace(pool.images[i].source_id, i);
  for (const auto& id : c.ids) {
    if (!index.count(id)) throw UsageError("unknown sample id '" + id + "'");
  }
  const fs::path dir = c.output_dir / "cam";
  fs::create_directories(dir);
  for (const auto& id : c.ids) {
    const std::size_t i = index.at(id);
    const RgbImage shown = prepare_eval_image(pool.images[i].image, c.augment);
    const CamHeatmap hm = grad_cam(model, to_tensor(shown, c.augment), {c.target_class, c.stage}, id);
    RgbImage heat(shown.width, shown.height);
    for (int y = 0; y < heat.height; ++y) {
      for (int x = 0; x < heat.width; ++x) {
        const auto col = jet_color(hm.values[static_cast<std::int64_t>(y) * heat.width + x]);
        for (int ch = 0; ch < 3; ++ch) heat.at(y, x, ch) = col[static_cast<std::size_t>(ch)];
      }
    }
    const std::string stem = safe_name(id);
    write_png(dir / (stem + "_heat.png"), heat);
    write_png(dir / (stem + "_overlay.png"), overlay(hm, shown, c.cam_alpha));
    const std::vector<std::uint8_t>* mask = nullptr;
    if (i < pool.masks.size() && pool.masks[i].size() == static_cast<std::size_t>(hm.values.numel())) {
      mask = &pool.masks[i];
    }
    write_text(dir / (stem + ".json"), cam_sidecar_json(hm, heat_statistics(hm, mask)) + "\n");
    std::printf("%s -> %s\n", id.c_str(), (dir / (stem + "_overlay.png")).c_str());
  }
  return 0;
}

int cmd_ablate(const RunConfig& c) {
  const Pool pool = load_pool(c);
  write_text(c.output_dir / "run_config.txt", to_config_text(c.settings));
  std::vector<ExperimentReport> reports;
  for (const auto& variant : c.variants) {
    reports.push_back(
        run_experiment(pool.images, experiment_options(c, variant, c.output_dir / variant)));
  }
  const std::string csv = ablation_csv(reports);
  write_text(c.output_dir / "ablation.csv", csv);
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage hybrid transformer: synthetic data, training, evaluation, "
               "Grad-CAM and ablation sweeps"};
  app.footer(
      "Settings come from preset defaults, then --config (flat 'key = value' lines, '#' comments),\n"
      "then flags. Every key is also a flag with dashes (per_class -> --per-class).\n"
      "The default seed is 0. Exit status: 0 success, 1 usage error, 2 runtime failure.");
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "flat key = value config file");
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_options;
  for (const auto& key : known_keys()) {
    std::string dashed = key.name;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    flag_options[key.name] = app.add_option("--" + dashed, flag_values[key.name], key.help);
  }

  const std::map<std::string, std::string> commands{
      {"synth", "write a synthetic dataset and manifest"},
      {"train", "run the five-fold experiment for one variant"},
      {"eval", "evaluate a checkpoint and emit metrics JSON"},
      {"cam", "write Grad-CAM heatmaps for listed ids"},
      {"ablate", "train every listed variant and emit a comparison table"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  std::string command;
  for (const auto* sub : app.get_subcommands()) command = sub->get_name();

  RunConfig cfg;
  try {
    Settings file;
    if (!config_path.empty()) file = load_config_file(config_path);
    Settings flags;
    for (const auto& [key, opt] : flag_options) {
      if (opt->count() > 0) flags[key] = flag_values[key];
    }
    cfg = resolve(merge_settings(file, flags));
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (command == "synth") return cmd_synth(cfg);
    if (command == "train") return cmd_train(cfg);
    if (command == "eval") return cmd_eval(cfg);
    if (command == "cam") return cmd_cam(cfg);
    if (command == "ablate") return cmd_ablate(cfg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
