#include "msht/explain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

namespace msht {

namespace {

Tensor as_batch(const Tensor& image) {
  if (image.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), image.shape().begin(), image.shape().end());
    return image.reshaped(s);
  }
  if (image.rank() == 4 && image.dim(0) == 1) return image;
  throw ShapeError("grad_cam expects one image [3,H,W] or [1,3,H,W], got " +
                   shape_to_string(image.shape()));
}

int resolve_stage(const Model& model, int stage) {
  const int active = model.config().fgd.stage_count;
  if (stage == 0) return active;
  if (stage < 1 || stage > active) {
    throw std::invalid_argument("CAM stage " + std::to_string(stage) + " is not active (model has " +
                                std::to_string(active) + " stages)");
  }
  return stage;
}

}  // namespace

Tensor grad_cam_raw(const Model& model, const Tensor& image, const CamOptions& options) {
  const int classes = model.config().fgd.num_classes;
  if (options.target_class < 0 || options.target_class >= classes) {
    throw std::invalid_argument("target class " + std::to_string(options.target_class) +
                                " outside [0, " + std::to_string(classes) + ")");
  }
  const int stage = resolve_stage(model, options.stage);
  ForwardTrace trace;
  Var logits = model.logits(Var(as_batch(image)), ForwardContext{}, &trace);
  const Var& map = trace.stages.maps.at(static_cast<std::size_t>(stage - 1));
  if (!map.requires_grad()) {
    throw std::runtime_error("target layer stage" + std::to_string(stage) +
                             " carries no gradient; run grad_cam with gradient recording enabled "
                             "(outside any NoGradGuard)");
  }
  Tensor seed(logits.shape());
  seed[options.target_class] = options.logit_scale;
  logits.backward(seed);
  if (!map.has_grad()) {
    throw std::runtime_error("target layer stage" + std::to_string(stage) + " received no gradient");
  }
  const Tensor& a = map.value();
  const Tensor& g = map.grad();
  const std::int64_t c = a.dim(1), h = a.dim(2), w = a.dim(3), hw = h * w;
  Tensor cam({h, w});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double alpha = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) alpha += g[ch * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::int64_t i = 0; i < hw; ++i) cam[i] += alpha * a[ch * hw + i];
  }
  for (auto& v : cam.values()) v = std::max(v, 0.0);
  for (auto& p : model.parameters()) {
    Var v = p.var;
    v.zero_grad();
  }
  return cam;
}

CamHeatmap grad_cam(const Model& model, const Tensor& image, const CamOptions& options,
                    const std::string& source_id) {
  const Tensor raw = grad_cam_raw(model, image, options);
  const Tensor batch = as_batch(image);
  const int out_h = static_cast<int>(batch.dim(2)), out_w = static_cast<int>(batch.dim(3));
  cv::Mat src(static_cast<int>(raw.dim(0)), static_cast<int>(raw.dim(1)), CV_64F,
              const_cast<double*>(raw.data()));
  cv::Mat up;
  cv::resize(src, up, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);

  CamHeatmap hm;
  hm.values = Tensor({out_h, out_w});
  std::copy(up.ptr<double>(), up.ptr<double>() + hm.values.numel(), hm.values.data());
  const auto [lo, hi] = std::minmax_element(hm.values.values().begin(), hm.values.values().end());
  const double mn = *lo, range = *hi - *lo;
  for (auto& v : hm.values.values()) v = range > 1e-300 ? std::clamp((v - mn) / range, 0.0, 1.0) : 0.0;
  hm.target_class = options.target_class;
  hm.target_layer = "stage" + std::to_string(resolve_stage(model, options.stage));
  hm.source_id = source_id;
  return hm;
}

std::array<std::uint8_t, 3> jet_color(double h) {
  h = std::clamp(h, 0.0, 1.0);
  auto channel = [](double x) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(1.5 - std::abs(x), 0.0, 1.0)));
  };
  return {channel(4.0 * h - 3.0), channel(4.0 * h - 2.0), channel(4.0 * h - 1.0)};
}

RgbImage overlay(const CamHeatmap& heatmap, const RgbImage& image, double alpha) {
  if (heatmap.values.rank() != 2 || heatmap.values.dim(0) != image.height ||
      heatmap.values.dim(1) != image.width) {
    throw ShapeError("overlay: heatmap " + shape_to_string(heatmap.values.shape()) +
                     " does not match image " + std::to_string(image.height) + "x" +
                     std::to_string(image.width));
  }
  if (alpha < 0 || alpha > 1) throw std::invalid_argument("overlay alpha must lie in [0, 1]");
  RgbImage out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double h = heatmap.values[static_cast<std::int64_t>(y) * image.width + x];
      const double w = alpha * h;
      const auto color = jet_color(h);
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - w) * image.at(y, x, c) + w * color[static_cast<std::size_t>(c)];
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

HeatStatistics heat_statistics(const CamHeatmap& heatmap, const std::vector<std::uint8_t>* mask) {
  const auto vals = heatmap.values.values();
  if (vals.empty()) throw std::invalid_argument("empty heatmap");
  HeatStatistics s;
  s.min = *std::min_element(vals.begin(), vals.end());
  s.max = *std::max_element(vals.begin(), vals.end());
  double sum = 0, in = 0, out = 0;
  std::size_t n_in = 0;
  if (mask && mask->size() != vals.size()) throw ShapeError("heat_statistics: mask size mismatch");
  for (std::size_t i = 0; i < vals.size(); ++i) {
    sum += vals[i];
    if (mask && (*mask)[i]) {
      in += vals[i];
      ++n_in;
    } else {
      out += vals[i];
    }
  }
  s.mean = sum / static_cast<double>(vals.size());
  if (mask) {
    s.has_mask = true;
    const std::size_t n_out = vals.size() - n_in;
    s.mean_inside = n_in ? in / static_cast<double>(n_in) : 0.0;
    s.mean_outside = n_out ? out / static_cast<double>(n_out) : 0.0;
  }
  return s;
}

std::string cam_sidecar_json(const CamHeatmap& heatmap, const HeatStatistics& stats) {
  nlohmann::ordered_json j;
  j["source_id"] = heatmap.source_id;
  j["target_class"] = heatmap.target_class;
  j["target_layer_tag"] = heatmap.target_layer;
  j["heat_statistics"] = {{"min", stats.min}, {"max", stats.max}, {"mean", stats.mean}};
  if (stats.has_mask) {
    j["heat_statistics"]["mean_inside_mask"] = stats.mean_inside;
    j["heat_statistics"]["mean_outside_mask"] = stats.mean_outside;
  }
  return j.dump(2);
}

}  // namespace msht
