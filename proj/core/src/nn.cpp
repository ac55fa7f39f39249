#include "msht/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace msht {

Var ParameterSet::add(const std::string& name, Tensor init, bool trainable) {
  Var v(std::move(init), trainable);
  add_existing(name, v, trainable);
  return v;
}

void ParameterSet::add_existing(const std::string& name, Var var, bool trainable) {
  if (index_.contains(name)) throw std::logic_error("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, std::move(var), trainable});
}

const Parameter* ParameterSet::find(const std::string& name) const {
  const auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::int64_t ParameterSet::trainable_count() const {
  std::int64_t n = 0;
  for (const auto& p : entries_) {
    if (p.trainable) n += p.var.value().numel();
  }
  return n;
}

Tensor Initializer::normal(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng_);
  return t;
}

Tensor Initializer::uniform(Shape shape, double limit) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.values()) v = dist(rng_);
  return t;
}

Tensor Initializer::kaiming(Shape shape) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  return normal(std::move(shape), std::sqrt(2.0 / static_cast<double>(fan_in)));
}

Tensor Initializer::xavier(Shape shape) {
  const double fan_out = static_cast<double>(shape.at(0));
  const double fan_in = static_cast<double>(shape.at(1));
  return uniform(std::move(shape), std::sqrt(6.0 / (fan_in + fan_out)));
}

Conv2d::Conv2d(ParameterSet& params, Initializer& init, const std::string& name, int in_channels,
               int out_channels, int kernel, int stride, int padding, bool with_bias)
    : options{stride, padding} {
  weight = params.add(name + ".weight", init.kaiming({out_channels, in_channels, kernel, kernel}));
  if (with_bias) bias = params.add(name + ".bias", Tensor::zeros({out_channels}));
}

BatchNorm2d::BatchNorm2d(ParameterSet& params, const std::string& name, int channels) {
  gamma = params.add(name + ".weight", Tensor::full({channels}, 1.0));
  beta = params.add(name + ".bias", Tensor::zeros({channels}));
  running_mean = params.add(name + ".running_mean", Tensor::zeros({channels}), false);
  running_var = params.add(name + ".running_var", Tensor::full({channels}, 1.0), false);
}

Var BatchNorm2d::operator()(const Var& x, bool training) const {
  // Running statistics are buffers; the op updates them in place.
  Var rm = running_mean;
  Var rv = running_var;
  return ops::batch_norm2d(x, gamma, beta, rm.mutable_value(), rv.mutable_value(), training);
}

Linear::Linear(ParameterSet& params, Initializer& init, const std::string& name, int in_features,
               int out_features) {
  weight = params.add(name + ".weight", init.xavier({out_features, in_features}));
  bias = params.add(name + ".bias", Tensor::zeros({out_features}));
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, int dim) {
  gamma = params.add(name + ".weight", Tensor::full({dim}, 1.0));
  beta = params.add(name + ".bias", Tensor::zeros({dim}));
}

}  // namespace msht
