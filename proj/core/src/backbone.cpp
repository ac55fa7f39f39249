#include "msht/backbone.hpp"

#include <stdexcept>
#include <string>

namespace msht {

BackboneConfig BackboneConfig::full() { return {}; }

BackboneConfig BackboneConfig::tiny() {
  BackboneConfig c;
  c.input_edge = 64;
  c.stem_channels = 16;
  c.stage_channels = {16, 32, 64, 128};
  c.block_counts = {1, 1, 1, 1};
  return c;
}

void BackboneConfig::validate() const {
  if (stage_channels.size() != 4 || block_counts.size() != 4) {
    throw std::invalid_argument("backbone needs exactly 4 stages, got " +
                                std::to_string(stage_channels.size()) + " channel entries and " +
                                std::to_string(block_counts.size()) + " block counts");
  }
  if (input_edge <= 0 || input_edge % 32 != 0) {
    throw std::invalid_argument("input edge " + std::to_string(input_edge) +
                                " is not a positive multiple of 32");
  }
  if (in_channels <= 0 || stem_channels <= 0 || expansion <= 0) {
    throw std::invalid_argument("backbone channel counts must be positive");
  }
  for (int i = 0; i < 4; ++i) {
    if (stage_channels[i] <= 0 || stage_channels[i] % expansion != 0) {
      throw std::invalid_argument("stage " + std::to_string(i + 1) + " channels " +
                                  std::to_string(stage_channels[i]) +
                                  " must be a positive multiple of the expansion " +
                                  std::to_string(expansion));
    }
    if (block_counts[i] < 1) {
      throw std::invalid_argument("stage " + std::to_string(i + 1) + " needs at least one block");
    }
  }
}

std::vector<int> BackboneConfig::stage_edge_sizes() const {
  std::vector<int> edges;
  int e = input_edge / 4;
  for (int i = 0; i < 4; ++i, e /= 2) edges.push_back(e);
  return edges;
}

Var Backbone::Bottleneck::forward(const Var& x, bool training) const {
  Var y = ops::relu(bn1(conv1(x), training));
  y = ops::relu(bn2(conv2(y), training));
  y = bn3(conv3(y), training);
  const Var shortcut = has_projection ? proj_bn(proj(x), training) : x;
  return ops::relu(ops::add(y, shortcut));
}

Backbone::Backbone(BackboneConfig config, std::uint64_t init_seed, int active_stages)
    : config_(std::move(config)), active_stages_(active_stages) {
  config_.validate();
  if (active_stages_ < 1 || active_stages_ > 4) {
    throw std::invalid_argument("active stages must be in [1, 4]");
  }
  Initializer init(init_seed);
  stem_conv_ = Conv2d(params_, init, "backbone.stem.conv", config_.in_channels,
                      config_.stem_channels, 7, 2, 3, false);
  stem_bn_ = BatchNorm2d(params_, "backbone.stem.bn", config_.stem_channels);

  int in = config_.stem_channels;
  for (int s = 0; s < active_stages_; ++s) {
    const int out = config_.stage_channels[s];
    const int width = out / config_.expansion;
    std::vector<Bottleneck> blocks;
    for (int b = 0; b < config_.block_counts[s]; ++b) {
      const std::string name =
          "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      Bottleneck blk;
      blk.conv1 = Conv2d(params_, init, name + ".conv1", in, width, 1, 1, 0, false);
      blk.bn1 = BatchNorm2d(params_, name + ".bn1", width);
      blk.conv2 = Conv2d(params_, init, name + ".conv2", width, width, 3, stride, 1, false);
      blk.bn2 = BatchNorm2d(params_, name + ".bn2", width);
      blk.conv3 = Conv2d(params_, init, name + ".conv3", width, out, 1, 1, 0, false);
      blk.bn3 = BatchNorm2d(params_, name + ".bn3", out);
      if (stride != 1 || in != out) {
        blk.has_projection = true;
        blk.proj = Conv2d(params_, init, name + ".downsample", in, out, 1, stride, 0, false);
        blk.proj_bn = BatchNorm2d(params_, name + ".downsample_bn", out);
      }
      blocks.push_back(std::move(blk));
      in = out;
    }
    stages_.push_back(std::move(blocks));
  }
}

StageFeatures Backbone::forward(const Var& images, bool training) const {
  const Shape expected{images.value().rank() == 4 ? images.dim(0) : -1, config_.in_channels,
                       config_.input_edge, config_.input_edge};
  if (images.value().rank() != 4 || images.shape() != expected) {
    throw ShapeError("backbone input: expected batch x " + std::to_string(config_.in_channels) +
                     " x " + std::to_string(config_.input_edge) + " x " +
                     std::to_string(config_.input_edge) + ", got " +
                     shape_to_string(images.shape()));
  }
  Var x = ops::relu(stem_bn_(stem_conv_(images), training));
  x = ops::max_pool2d(x, 3, 2, 1);
  StageFeatures features;
  for (const auto& stage : stages_) {
    for (const auto& blk : stage) x = blk.forward(x, training);
    features.maps.push_back(x);
  }
  return features;
}

Backbone build_backbone(const BackboneConfig& config, std::uint64_t init_seed) {
  return Backbone(config, init_seed);
}

LoadReport load_pretrained_stem(Backbone& backbone, const ParameterArchive& archive) {
  return load_parameters(backbone.parameters().entries(), archive);
}

}  // namespace msht
