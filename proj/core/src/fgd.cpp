#include "msht/fgd.hpp"

#include <cmath>
#include <stdexcept>

namespace msht {

FgdConfig FgdConfig::full() { return {}; }

FgdConfig FgdConfig::tiny() {
  FgdConfig c;
  c.token_dim = 64;
  c.heads = 4;
  c.ffn_hidden = 256;
  return c;
}

void FgdConfig::validate(const std::vector<int>& stage_edges) const {
  if (token_dim <= 0 || heads <= 0 || token_dim % heads != 0) {
    throw std::invalid_argument("token dim " + std::to_string(token_dim) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (stage_count != 3 && stage_count != 4) {
    throw std::invalid_argument("stage count must be 3 or 4, got " + std::to_string(stage_count));
  }
  if (static_cast<int>(pool_windows.size()) != stage_count) {
    throw std::invalid_argument("expected " + std::to_string(stage_count) +
                                " pool windows, got " + std::to_string(pool_windows.size()));
  }
  if (static_cast<int>(stage_edges.size()) < stage_count) {
    throw std::invalid_argument("fewer stage edges than active stages");
  }
  if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  if (ffn_hidden <= 0 || patch_size <= 0) throw std::invalid_argument("sizes must be positive");
  if (!(simam_lambda > 0.0)) throw std::invalid_argument("simam lambda must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  const int last = stage_edges[static_cast<std::size_t>(stage_count - 1)];
  if (last % patch_size != 0) {
    throw std::invalid_argument("last-stage edge " + std::to_string(last) +
                                " is not divisible by patch size " + std::to_string(patch_size));
  }
  for (int l = 0; l < stage_count; ++l) {
    const int e = stage_edges[static_cast<std::size_t>(l)];
    const int p = pool_windows[static_cast<std::size_t>(l)];
    if (p <= 0 || e % p != 0 || e / p != last / patch_size) {
      throw std::invalid_argument("stage " + std::to_string(l + 1) + ": edge " +
                                  std::to_string(e) + " pooled by " + std::to_string(p) +
                                  " does not give the token grid edge " +
                                  std::to_string(last / patch_size));
    }
  }
}

int FgdConfig::patch_count(int last_edge) const {
  const int g = last_edge / patch_size;
  return g * g;
}

int FgdConfig::sequence_length(int last_edge) const {
  return patch_count(last_edge) + (use_class_token ? 1 : 0);
}

Var embed_tokens(const Var& projected_map, const SharedEmbeddings& shared, const FgdConfig& cfg) {
  Var tokens = ops::map_to_tokens(projected_map);
  if (cfg.use_class_token) tokens = ops::prepend_token(tokens, shared.class_token);
  if (cfg.use_positional_encoding) tokens = ops::add_positional(tokens, shared.positional);
  return tokens;
}

HybridEmbedding::HybridEmbedding(ParameterSet& params, Initializer& init, int in_channels,
                                 const SharedEmbeddings& shared, const FgdConfig& cfg)
    : shared_(shared), cfg_(cfg) {
  projection = Conv2d(params, init, "fgd.embed.proj", in_channels, cfg.token_dim, cfg.patch_size,
                      cfg.patch_size, 0, true);
}

Var HybridEmbedding::operator()(const Var& stage_map) const {
  if (stage_map.value().rank() != 4 || stage_map.dim(2) % cfg_.patch_size != 0 ||
      stage_map.dim(3) % cfg_.patch_size != 0) {
    throw ShapeError("hybrid embedding: map " + shape_to_string(stage_map.shape()) +
                     " is not divisible into " + std::to_string(cfg_.patch_size) + "-pixel patches");
  }
  return embed_tokens(projection(stage_map), shared_, cfg_);
}

FocusBlock::FocusBlock(ParameterSet& params, Initializer& init, int stage, int channels,
                       int window, int last_edge, const SharedEmbeddings& shared,
                       const FgdConfig& cfg)
    : stage_(stage), window_(window), last_edge_(last_edge), shared_(shared), cfg_(cfg) {
  const std::string name = "fgd.focus" + std::to_string(stage);
  if (cfg.attention == AttentionVariant::se) {
    se = SeBlock(params, init, name + ".se", channels, cfg.attention_reduction);
  } else if (cfg.attention == AttentionVariant::cbam) {
    cbam = CbamBlock(params, init, name + ".cbam", channels, cfg.attention_reduction);
  }
  proj_max = Conv2d(params, init, name + ".proj_max", channels, cfg.token_dim, 1, 1, 0, true);
  proj_avg = Conv2d(params, init, name + ".proj_avg", channels, cfg.token_dim, 1, 1, 0, true);
}

Var FocusBlock::attend(const Var& stage_map) const {
  switch (cfg_.attention) {
    case AttentionVariant::simam: return ops::simam(stage_map, cfg_.simam_lambda);
    case AttentionVariant::se: return se(stage_map);
    case AttentionVariant::cbam: return cbam(stage_map);
    case AttentionVariant::none: return stage_map;
  }
  return stage_map;
}

GuidancePair FocusBlock::guide(const Var& attended) const {
  const int grid = last_edge_ / cfg_.patch_size;
  if (attended.value().rank() != 4 || attended.dim(2) % window_ != 0 ||
      attended.dim(2) / window_ != grid || attended.dim(3) / window_ != grid) {
    throw ShapeError("focus block of stage " + std::to_string(stage_) + ": map " +
                     shape_to_string(attended.shape()) + " pooled by " + std::to_string(window_) +
                     " does not match the " + std::to_string(grid) + "x" + std::to_string(grid) +
                     " token grid");
  }
  const Var pooled_max = ops::max_pool2d(attended, window_, window_);
  const Var pooled_avg = ops::avg_pool2d(attended, window_, window_);
  GuidancePair g;
  g.q = embed_tokens(proj_max(pooled_max), shared_, cfg_);
  g.k = embed_tokens(proj_avg(pooled_avg), shared_, cfg_);
  g.stage = stage_;
  return g;
}

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, Initializer& init,
                                       const std::string& name, int dim, int heads_,
                                       bool literal)
    : heads(heads_), paper_literal_scaling(literal) {
  if (dim % heads != 0) {
    throw std::invalid_argument("attention dim " + std::to_string(dim) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
  query = Linear(params, init, name + ".query", dim, dim);
  key = Linear(params, init, name + ".key", dim, dim);
  value = Linear(params, init, name + ".value", dim, dim);
  out = Linear(params, init, name + ".out", dim, dim);
}

Var MultiHeadAttention::operator()(const Var& query_src, const Var& key_src,
                                   const Var& value_src, Tensor* weights_out) const {
  for (const Var* v : {&query_src, &key_src, &value_src}) {
    if (v->value().rank() != 3) {
      throw ShapeError("attention input must be batch x tokens x dim, got " +
                       shape_to_string(v->shape()));
    }
    if (!v->value().all_finite()) throw std::domain_error("attention input has non-finite values");
  }
  if (key_src.dim(1) != value_src.dim(1)) {
    throw ShapeError("attention: key length " + std::to_string(key_src.dim(1)) +
                     " differs from value length " + std::to_string(value_src.dim(1)));
  }
  const auto dim = static_cast<double>(query.weight.dim(0));
  Var q = query(query_src);
  Var k = key(key_src);
  Var v = value(value_src);
  double logit_scale = 1.0;
  if (paper_literal_scaling) {
    const double s = 1.0 / std::sqrt(dim);
    q = ops::scale(q, s);
    k = ops::scale(k, s);
    v = ops::scale(v, s);
  } else {
    logit_scale = 1.0 / std::sqrt(dim / heads);
  }
  const Var scores =
      ops::scale(ops::matmul(ops::split_heads(q, heads), ops::split_heads(k, heads), false, true),
                 logit_scale);
  const Var weights = ops::softmax(scores);
  if (weights_out) *weights_out = weights.value();
  return out(ops::merge_heads(ops::matmul(weights, ops::split_heads(v, heads))));
}

Var mhsa(const MultiHeadAttention& attn, const Var& tokens, Tensor* weights_out) {
  return attn(tokens, tokens, tokens, weights_out);
}

Var mhga(const MultiHeadAttention& attn, const Var& stream, const GuidancePair& guidance,
         Tensor* weights_out) {
  if (guidance.q.shape() != stream.shape() || guidance.k.shape() != stream.shape()) {
    throw ShapeError("guided attention: guidance " + shape_to_string(guidance.q.shape()) + "/" +
                     shape_to_string(guidance.k.shape()) + " vs stream " +
                     shape_to_string(stream.shape()) + " (stage " +
                     std::to_string(guidance.stage) + ")");
  }
  return attn(guidance.q, guidance.k, stream, weights_out);
}

FeedForward::FeedForward(ParameterSet& params, Initializer& init, const std::string& name,
                         int dim, int hidden) {
  fc1 = Linear(params, init, name + ".fc1", dim, hidden);
  fc2 = Linear(params, init, name + ".fc2", hidden, dim);
}

Var FeedForward::operator()(const Var& x, double dropout, const ForwardContext& ctx) const {
  Var h = ops::gelu(fc1(x));
  if (ctx.training && dropout > 0.0) h = ops::dropout(h, dropout, *ctx.rng, true);
  return fc2(h);
}

namespace {
Var maybe_dropout(const Var& x, double p, const ForwardContext& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (!ctx.rng) throw std::logic_error("dropout during training needs an rng");
  return ops::dropout(x, p, *ctx.rng, true);
}
}  // namespace

FgdDecoder::FgdDecoder(ParameterSet& params, Initializer& init, const std::string& name,
                       const FgdConfig& cfg)
    : dropout_(cfg.dropout) {
  norm_self = LayerNorm(params, name + ".norm_self", cfg.token_dim);
  self_attention = MultiHeadAttention(params, init, name + ".mhsa", cfg.token_dim, cfg.heads,
                                      cfg.paper_literal_scaling);
  norm_ffn1 = LayerNorm(params, name + ".norm_ffn1", cfg.token_dim);
  ffn1 = FeedForward(params, init, name + ".ffn1", cfg.token_dim, cfg.ffn_hidden);
  norm_guided = LayerNorm(params, name + ".norm_guided", cfg.token_dim);
  guided_attention = MultiHeadAttention(params, init, name + ".mhga", cfg.token_dim, cfg.heads,
                                        cfg.paper_literal_scaling);
  norm_ffn2 = LayerNorm(params, name + ".norm_ffn2", cfg.token_dim);
  ffn2 = FeedForward(params, init, name + ".ffn2", cfg.token_dim, cfg.ffn_hidden);
}

Var FgdDecoder::operator()(const Var& z, const GuidancePair& guidance, const ForwardContext& ctx,
                           DecoderTrace* trace) const {
  Tensor* sw = trace ? &trace->self_weights : nullptr;
  Tensor* gw = trace ? &trace->guided_weights : nullptr;
  Var z1 = ops::add(maybe_dropout(mhsa(self_attention, norm_self(z), sw), dropout_, ctx), z);
  Var z2 = ops::add(maybe_dropout(ffn1(norm_ffn1(z1), dropout_, ctx), dropout_, ctx), z1);
  Var z3 = ops::add(
      maybe_dropout(mhga(guided_attention, norm_guided(z2), guidance, gw), dropout_, ctx), z2);
  return ops::add(maybe_dropout(ffn2(norm_ffn2(z3), dropout_, ctx), dropout_, ctx), z3);
}

EncoderBlock::EncoderBlock(ParameterSet& params, Initializer& init, const std::string& name,
                           const FgdConfig& cfg)
    : dropout_(cfg.dropout) {
  norm_self = LayerNorm(params, name + ".norm_self", cfg.token_dim);
  self_attention = MultiHeadAttention(params, init, name + ".mhsa", cfg.token_dim, cfg.heads,
                                      cfg.paper_literal_scaling);
  norm_ffn = LayerNorm(params, name + ".norm_ffn", cfg.token_dim);
  ffn = FeedForward(params, init, name + ".ffn", cfg.token_dim, cfg.ffn_hidden);
}

Var EncoderBlock::operator()(const Var& z, const ForwardContext& ctx, Tensor* weights_out) const {
  Var z1 = ops::add(maybe_dropout(mhsa(self_attention, norm_self(z), weights_out), dropout_, ctx), z);
  return ops::add(maybe_dropout(ffn(norm_ffn(z1), dropout_, ctx), dropout_, ctx), z1);
}

ClassificationHead::ClassificationHead(ParameterSet& params, Initializer& init,
                                       const FgdConfig& cfg)
    : use_class_token_(cfg.use_class_token) {
  norm = LayerNorm(params, "head.norm", cfg.token_dim);
  fc = Linear(params, init, "head.fc", cfg.token_dim, cfg.num_classes);
}

Var ClassificationHead::operator()(const Var& z) const {
  const Var pooled = use_class_token_ ? ops::select_token(z, 0) : ops::mean_tokens(z);
  return fc(norm(pooled));
}

}  // namespace msht
