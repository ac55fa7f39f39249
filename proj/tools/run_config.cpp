#include "run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace msht::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string canonical_key(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

bool is_known(const std::string& key) {
  const auto& keys = known_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const KeyInfo& k) { return k.name == key; });
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const Settings& s) : s_(s) {}

  const std::string& str(const std::string& key) const {
    auto it = s_.find(key);
    if (it == s_.end()) throw UsageError("missing setting '" + key + "'");
    return it->second;
  }
  double real(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw UsageError("setting '" + key + "' expects a number, got '" + v + "'");
  }
  long long integer(const std::string& key) const {
    const std::string& v = str(key);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw UsageError("setting '" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
  }
  int count(const std::string& key) const { return static_cast<int>(integer(key)); }
  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError("setting '" + key + "' expects true or false, got '" + v + "'");
  }

 private:
  const Settings& s_;
};

}  // namespace

const std::vector<KeyInfo>& known_keys() {
  static const std::vector<KeyInfo> keys{
      {"preset", "model scale: tiny (64-pixel desk model) or full (384-pixel model)"},
      {"variant", "architecture variant for train"},
      {"variants", "comma-separated variants for ablate"},
      {"data", "dataset root with positive/ and negative/ folders; empty = synthetic"},
      {"seed", "master seed for every random choice"},
      {"output_dir", "directory receiving every artifact"},
      {"workers", "threads for image loading"},
      {"folds", "number of folds to run (1-5)"},
      {"lr", "initial learning rate"},
      {"final_lr_ratio", "final learning rate as a fraction of lr"},
      {"weight_decay", "decoupled weight decay"},
      {"epochs", "training epochs per fold"},
      {"batch_size", "training batch size"},
      {"eval_batch_size", "evaluation batch size"},
      {"class_weighting", "inverse-frequency loss weights"},
      {"augment", "apply training augmentation"},
      {"edge", "synthetic image edge"},
      {"per_class", "synthetic images per class"},
      {"blobs", "synthetic blobs per image"},
      {"blob_radius", "synthetic blob radius"},
      {"cluster_radius", "radius bounding clustered blob centers"},
      {"min_spread", "minimum spread of dispersed blob centers"},
      {"rotation_deg", "rotation range in degrees, drawn from [-r, r]"},
      {"crop_edge", "center-crop edge"},
      {"flip_prob", "horizontal flip probability"},
      {"brightness", "brightness jitter strength"},
      {"contrast", "contrast jitter strength"},
      {"saturation", "saturation jitter strength"},
      {"hue", "hue jitter strength"},
      {"normalization", "input normalization: none or imagenet"},
      {"normalize_aspect", "resize ingested images to ingest_width x ingest_height"},
      {"ingest_width", "ingest resize width"},
      {"ingest_height", "ingest resize height"},
      {"paper_literal_scaling", "scale q, k and v by 1/sqrt(D) instead of the logits"},
      {"dropout", "dropout probability inside decoders"},
      {"checkpoint", "checkpoint file for eval and cam"},
      {"split", "eval subset: all, test, or a fold number 1-5 (needs data/manifest.csv)"},
      {"ids", "comma-separated sample ids for cam"},
      {"stage", "Grad-CAM backbone stage (0 = last active)"},
      {"target_class", "Grad-CAM target class (0 = positive, 1 = negative)"},
      {"cam_alpha", "overlay opacity"},
  };
  return keys;
}

Settings parse_config_text(const std::string& text, const std::string& origin) {
  Settings out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = canonical_key(trim(line.substr(0, eq)));
    if (!is_known(key)) {
      throw UsageError(origin + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

Settings load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

Settings preset_defaults(const std::string& preset) {
  if (preset != "tiny" && preset != "full") {
    throw UsageError("unknown preset '" + preset + "' (expected tiny or full)");
  }
  const bool tiny = preset == "tiny";
  std::string all;
  for (auto v : all_variants()) all += (all.empty() ? "" : ",") + to_string(v);
  return {
      {"preset", preset},
      {"variant", "MSHT"},
      {"variants", all},
      {"data", ""},
      {"seed", std::to_string(kDefaultSeed)},
      {"output_dir", "msht_out"},
      {"workers", "1"},
      {"folds", "5"},
      {"lr", tiny ? "1e-3" : "6e-5"},
      {"final_lr_ratio", "0.1"},
      {"weight_decay", "0.05"},
      {"epochs", tiny ? "10" : "50"},
      {"batch_size", tiny ? "16" : "8"},
      {"eval_batch_size", "16"},
      {"class_weighting", "false"},
      {"augment", "true"},
      {"edge", "64"},
      {"per_class", "256"},
      {"blobs", "8"},
      {"blob_radius", "3"},
      {"cluster_radius", "14"},
      {"min_spread", "36"},
      {"rotation_deg", tiny ? "0" : "180"},
      {"crop_edge", tiny ? "64" : "700"},
      {"flip_prob", "0.5"},
      {"brightness", "0.15"},
      {"contrast", "0.3"},
      {"saturation", "0.3"},
      {"hue", "0.06"},
      {"normalization", "none"},
      {"normalize_aspect", tiny ? "false" : "true"},
      {"ingest_width", "1390"},
      {"ingest_height", "1038"},
      {"paper_literal_scaling", "false"},
      {"dropout", "0"},
      {"checkpoint", ""},
      {"split", "all"},
      {"ids", ""},
      {"stage", "0"},
      {"target_class", "0"},
      {"cam_alpha", "0.5"},
  };
}

Settings merge_settings(const Settings& file, const Settings& flags) {
  std::string preset = "tiny";
  if (auto it = file.find("preset"); it != file.end()) preset = it->second;
  if (auto it = flags.find("preset"); it != flags.end()) preset = it->second;
  Settings out = preset_defaults(preset);
  for (const auto& [k, v] : file) out[k] = v;
  for (const auto& [k, v] : flags) out[k] = v;
  return out;
}

RunConfig resolve(const Settings& merged) {
  Reader r(merged);
  RunConfig c;
  c.settings = merged;
  c.preset = r.str("preset");
  c.base = c.preset == "full" ? ModelConfig::full() : ModelConfig::tiny();

  c.variant = r.str("variant");
  c.variants = split_list(r.str("variants"));
  try {
    (void)parse_variant(c.variant);
    for (const auto& v : c.variants) (void)parse_variant(v);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (c.variants.empty()) throw UsageError("variants must list at least one variant");

  c.data = r.str("data");
  const long long seed = r.integer("seed");
  if (seed < 0) throw UsageError("seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.output_dir = r.str("output_dir");
  if (c.output_dir.empty()) throw UsageError("output_dir must not be empty");
  c.workers = r.count("workers");
  if (c.workers < 1) throw UsageError("workers must be at least 1");
  c.folds = r.count("folds");
  if (c.folds < 1 || c.folds > kFoldCount) throw UsageError("folds must lie in [1, 5]");

  c.hp.learning_rate = r.real("lr");
  c.hp.final_lr_ratio = r.real("final_lr_ratio");
  c.hp.weight_decay = r.real("weight_decay");
  c.hp.epochs = r.count("epochs");
  c.hp.batch_size = r.count("batch_size");
  c.hp.eval_batch_size = r.count("eval_batch_size");
  c.hp.class_weighting = r.flag("class_weighting");
  c.hp.augment = r.flag("augment");

  c.synth.edge = r.count("edge");
  c.synth.per_class = r.count("per_class");
  c.synth.blobs = r.count("blobs");
  c.synth.blob_radius = r.count("blob_radius");
  c.synth.cluster_radius = r.count("cluster_radius");
  c.synth.min_spread = r.count("min_spread");

  c.augment.rotation_deg = r.real("rotation_deg");
  c.augment.crop_edge = r.count("crop_edge");
  c.augment.resize_edge = c.base.backbone.input_edge;
  c.augment.flip_prob = r.real("flip_prob");
  c.augment.brightness = r.real("brightness");
  c.augment.contrast = r.real("contrast");
  c.augment.saturation = r.real("saturation");
  c.augment.hue = r.real("hue");
  const std::string norm = r.str("normalization");
  if (norm == "imagenet") {
    c.augment.mean = {0.485, 0.456, 0.406};
    c.augment.stddev = {0.229, 0.224, 0.225};
  } else if (norm != "none") {
    throw UsageError("normalization must be none or imagenet");
  }

  c.ingest.normalize_aspect = r.flag("normalize_aspect");
  c.ingest.target_width = r.count("ingest_width");
  c.ingest.target_height = r.count("ingest_height");

  c.base.fgd.paper_literal_scaling = r.flag("paper_literal_scaling");
  c.base.fgd.dropout = r.real("dropout");

  c.checkpoint = r.str("checkpoint");
  c.split = r.str("split");
  c.ids = split_list(r.str("ids"));
  c.stage = r.count("stage");
  c.target_class = r.count("target_class");
  c.cam_alpha = r.real("cam_alpha");

  try {
    c.hp.validate();
    c.augment.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (c.base.fgd.dropout < 0 || c.base.fgd.dropout >= 1) throw UsageError("dropout must lie in [0, 1)");
  return c;
}

std::string to_config_text(const Settings& settings) {
  std::string out;
  for (const auto& [k, v] : settings) out += k + " = " + v + "\n";
  return out;
}

}  // namespace msht::cli
