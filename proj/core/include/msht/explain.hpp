#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msht/datapipe.hpp"
#include "msht/model.hpp"

namespace msht {

/// Normalized class-activation map at input resolution.
struct CamHeatmap {
  Tensor values;  // [H, W] in [0, 1]
  int target_class = 0;
  std::string target_layer;  // "stage1".."stage4"
  std::string source_id;
};

struct CamOptions {
  int target_class = 0;
  int stage = 0;             // 1-based backbone stage; 0 = last active stage
  double logit_scale = 1.0;  // multiplies the target logit before differentiation
};

/// Rectified, gradient-weighted channel sum of the chosen stage map before
/// upsampling and normalization. image is [3,H,W] or [1,3,H,W].
Tensor grad_cam_raw(const Model& model, const Tensor& image, const CamOptions& options = {});

/// grad_cam_raw, bilinearly upsampled to the input size and min-max
/// normalized; a constant map becomes all zeros.
CamHeatmap grad_cam(const Model& model, const Tensor& image, const CamOptions& options = {},
                    const std::string& source_id = {});

/// Heat-weighted blend: out = (1 - a*h) * image + a*h * jet(h).
RgbImage overlay(const CamHeatmap& heatmap, const RgbImage& image, double alpha = 0.5);

/// Deterministic jet color map for h in [0, 1].
std::array<std::uint8_t, 3> jet_color(double h);

struct HeatStatistics {
  double min = 0, max = 0, mean = 0;
  double mean_inside = 0, mean_outside = 0;  // only with a mask
  bool has_mask = false;
};

HeatStatistics heat_statistics(const CamHeatmap& heatmap,
                               const std::vector<std::uint8_t>* mask = nullptr);

/// {source_id, target_class, target_layer_tag, heat_statistics}
std::string cam_sidecar_json(const CamHeatmap& heatmap, const HeatStatistics& stats);

}  // namespace msht
