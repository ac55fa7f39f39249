#pragma once

#include <string>

#include "msht/nn.hpp"

namespace msht {

/// Shape-preserving attention applied to a stage map inside a focus block.
enum class AttentionVariant { simam, se, cbam, none };

std::string to_string(AttentionVariant v);
AttentionVariant parse_attention_variant(const std::string& name);

Var simam(const Var& x, double lambda);

/// Squeeze-and-excitation channel gating.
class SeBlock {
 public:
  SeBlock() = default;
  SeBlock(ParameterSet& params, Initializer& init, const std::string& name, int channels,
          int reduction);
  Var operator()(const Var& x) const;

  Linear squeeze, excite;
};

/// Channel gate from avg- and max-pooled descriptors through a shared MLP,
/// followed by a 7x7 spatial gate over channel mean and max.
class CbamBlock {
 public:
  CbamBlock() = default;
  CbamBlock(ParameterSet& params, Initializer& init, const std::string& name, int channels,
            int reduction);
  Var operator()(const Var& x) const;

  Linear mlp_in, mlp_out;
  Conv2d spatial;
};

}  // namespace msht
