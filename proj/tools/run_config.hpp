#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "msht/datapipe.hpp"
#include "msht/model.hpp"
#include "msht/trainer.hpp"

namespace msht::cli {

/// Bad configuration or arguments; the tool exits with status 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint64_t kDefaultSeed = 0;

struct KeyInfo {
  std::string name;
  std::string help;
};

/// Every key accepted in a config file or as --flag (underscores become
/// dashes on the command line).
const std::vector<KeyInfo>& known_keys();

using Settings = std::map<std::string, std::string>;

/// Flat "key = value" lines; '#' starts a comment. Unknown keys and
/// malformed lines throw UsageError naming the origin and line.
Settings parse_config_text(const std::string& text, const std::string& origin);
Settings load_config_file(const std::filesystem::path& path);

/// Preset defaults ("tiny" or "full").
Settings preset_defaults(const std::string& preset);

/// Layers preset defaults under file values under flag values.
Settings merge_settings(const Settings& file, const Settings& flags);

struct RunConfig {
  std::string preset;
  std::string variant;
  std::vector<std::string> variants;
  std::string data;  // empty = synthetic
  std::uint64_t seed = kDefaultSeed;
  std::filesystem::path output_dir;
  int workers = 1;
  int folds = kFoldCount;
  ModelConfig base;
  Hyperparams hp;
  AugmentConfig augment;
  IngestOptions ingest;
  SynthSpec synth;
  std::filesystem::path checkpoint;
  std::string split;
  std::vector<std::string> ids;
  int stage = 0;
  int target_class = 0;
  double cam_alpha = 0.5;
  Settings settings;  // the resolved key-value view
};

/// Typed view of merged settings; validates variant names, numbers and ranges.
RunConfig resolve(const Settings& merged);

/// Resolved settings as config-file text (reloadable).
std::string to_config_text(const Settings& settings);

}  // namespace msht::cli
