#include "msht/attention_modules.hpp"

#include <stdexcept>

namespace msht {

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::simam: return "simam";
    case AttentionVariant::se: return "se";
    case AttentionVariant::cbam: return "cbam";
    case AttentionVariant::none: return "none";
  }
  return "unknown";
}

AttentionVariant parse_attention_variant(const std::string& name) {
  for (auto v : {AttentionVariant::simam, AttentionVariant::se, AttentionVariant::cbam,
                 AttentionVariant::none}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown attention variant '" + name +
                              "' (valid: simam, se, cbam, none)");
}

Var simam(const Var& x, double lambda) { return ops::simam(x, lambda); }

namespace {
int reduced_width(int channels, int reduction) {
  if (reduction < 1 || channels < reduction) {
    throw std::invalid_argument("channel count " + std::to_string(channels) +
                                " is below the reduction ratio " + std::to_string(reduction));
  }
  return channels / reduction;
}
}  // namespace

SeBlock::SeBlock(ParameterSet& params, Initializer& init, const std::string& name, int channels,
                 int reduction) {
  const int hidden = reduced_width(channels, reduction);
  squeeze = Linear(params, init, name + ".squeeze", channels, hidden);
  excite = Linear(params, init, name + ".excite", hidden, channels);
}

Var SeBlock::operator()(const Var& x) const {
  const Var s = ops::global_avg_pool(x);
  const Var gate = ops::sigmoid(excite(ops::relu(squeeze(s))));
  return ops::scale_channels(x, gate);
}

CbamBlock::CbamBlock(ParameterSet& params, Initializer& init, const std::string& name,
                     int channels, int reduction) {
  const int hidden = reduced_width(channels, reduction);
  mlp_in = Linear(params, init, name + ".mlp_in", channels, hidden);
  mlp_out = Linear(params, init, name + ".mlp_out", hidden, channels);
  spatial = Conv2d(params, init, name + ".spatial", 2, 1, 7, 1, 3, false);
}

Var CbamBlock::operator()(const Var& x) const {
  auto mlp = [this](const Var& v) { return mlp_out(ops::relu(mlp_in(v))); };
  const Var channel_gate =
      ops::sigmoid(ops::add(mlp(ops::global_avg_pool(x)), mlp(ops::global_max_pool(x))));
  const Var y = ops::scale_channels(x, channel_gate);
  const Var pooled = ops::concat_channels(ops::channel_mean(y), ops::channel_max(y));
  return ops::scale_spatial(y, ops::sigmoid(spatial(pooled)));
}

}  // namespace msht
