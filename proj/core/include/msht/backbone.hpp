#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "msht/archive.hpp"
#include "msht/nn.hpp"

namespace msht {

/// Staged bottleneck CNN. Stage l has output edge input_edge / (4 * 2^(l-1)).
struct BackboneConfig {
  int in_channels = 3;
  int input_edge = 384;
  int stem_channels = 64;
  std::vector<int> stage_channels{256, 512, 1024, 2048};
  std::vector<int> block_counts{3, 4, 6, 3};
  int expansion = 4;  // bottleneck width = stage channels / expansion

  static BackboneConfig full();
  static BackboneConfig tiny();

  /// Throws std::invalid_argument on non-4-stage lists or an input edge not
  /// divisible by 32.
  void validate() const;
  std::vector<int> stage_edge_sizes() const;
};

/// Per-stage output maps, map l shaped batch x C_l x E_l x E_l.
struct StageFeatures {
  std::vector<Var> maps;
};

class Backbone {
 public:
  /// active_stages < 4 builds and runs only the leading stages.
  Backbone(BackboneConfig config, std::uint64_t init_seed, int active_stages = 4);

  /// images: batch x in_channels x E x E.
  StageFeatures forward(const Var& images, bool training) const;

  const BackboneConfig& config() const { return config_; }
  int active_stages() const { return active_stages_; }
  const ParameterSet& parameters() const { return params_; }

 private:
  struct Bottleneck {
    Conv2d conv1, conv2, conv3;
    BatchNorm2d bn1, bn2, bn3;
    bool has_projection = false;
    Conv2d proj;
    BatchNorm2d proj_bn;
    Var forward(const Var& x, bool training) const;
  };

  BackboneConfig config_;
  int active_stages_;
  ParameterSet params_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<std::vector<Bottleneck>> stages_;
};

Backbone build_backbone(const BackboneConfig& config, std::uint64_t init_seed);

/// Loads backbone.* entries from an archive (e.g. ImageNet weights converted
/// to this format). Missing names are reported, never fatal; shape conflicts
/// throw before any parameter changes.
LoadReport load_pretrained_stem(Backbone& backbone, const ParameterArchive& archive);

}  // namespace msht
