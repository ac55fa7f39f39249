#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "msht/autograd.hpp"
#include "msht/ops.hpp"

namespace msht {

struct Parameter {
  std::string name;
  Var var;
  bool trainable = true;  // false for buffers such as running statistics
};

/// Named, ordered registry of parameters and buffers. Layers keep Var
/// handles to the same nodes, so updating a value here is seen everywhere.
class ParameterSet {
 public:
  Var add(const std::string& name, Tensor init, bool trainable = true);
  /// Registers an existing variable under a name (shared parameters).
  void add_existing(const std::string& name, Var var, bool trainable = true);

  const Parameter* find(const std::string& name) const;
  const std::vector<Parameter>& entries() const { return entries_; }
  std::int64_t trainable_count() const;

 private:
  std::vector<Parameter> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Seeded source for parameter initialization.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor normal(Shape shape, double stddev);
  Tensor uniform(Shape shape, double limit);
  /// He-normal for a weight whose fan-in is the product of dims 1..n.
  Tensor kaiming(Shape shape);
  /// Glorot-uniform for a [out, in] matrix.
  Tensor xavier(Shape shape);

 private:
  std::mt19937_64 rng_;
};

struct Conv2d {
  Var weight;
  Var bias;  // may be undefined
  ops::Conv2dOptions options;

  Conv2d() = default;
  Conv2d(ParameterSet& params, Initializer& init, const std::string& name, int in_channels,
         int out_channels, int kernel, int stride, int padding, bool with_bias);
  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, options); }
};

struct BatchNorm2d {
  Var gamma, beta, running_mean, running_var;

  BatchNorm2d() = default;
  BatchNorm2d(ParameterSet& params, const std::string& name, int channels);
  Var operator()(const Var& x, bool training) const;
};

struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(ParameterSet& params, Initializer& init, const std::string& name, int in_features,
         int out_features);
  Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
};

struct LayerNorm {
  Var gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, int dim);
  Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta); }
};

}  // namespace msht
