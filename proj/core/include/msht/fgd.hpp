#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "msht/attention_modules.hpp"
#include "msht/nn.hpp"

namespace msht {

/// Focus-guided decoder hyperparameters.
struct FgdConfig {
  int token_dim = 768;
  int heads = 12;
  int patch_size = 1;
  std::vector<int> pool_windows{8, 4, 2, 1};  // one per active stage
  int ffn_hidden = 3072;
  int num_classes = 2;
  AttentionVariant attention = AttentionVariant::simam;
  double simam_lambda = 1e-4;
  int attention_reduction = 16;  // SE / CBAM bottleneck ratio
  bool use_class_token = true;
  bool use_positional_encoding = true;
  int stage_count = 4;
  /// Scale q, k and v projections by 1/sqrt(D) instead of scaling logits by
  /// 1/sqrt(D / heads).
  bool paper_literal_scaling = false;
  double dropout = 0.0;

  static FgdConfig full();
  static FgdConfig tiny();

  /// Checks divisibility and that every pooled stage edge equals the last
  /// active stage edge. stage_edges holds at least stage_count entries.
  void validate(const std::vector<int>& stage_edges) const;
  /// N = (E / p)^2 for last-stage edge E.
  int patch_count(int last_edge) const;
  /// N, plus one when the class token is enabled.
  int sequence_length(int last_edge) const;
};

/// The class token and positional encoding, one instance shared by the
/// hybrid embedding and every focus block.
struct SharedEmbeddings {
  Var class_token;  // [1, D], zero-initialized
  Var positional;   // [sequence_length, D]
};

/// Guidance sequences from the focus block of one stage.
struct GuidancePair {
  Var q;
  Var k;
  int stage = 0;  // 1-based
};

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

/// [B,D,H,W] -> tokens, prepend class token, add positional encoding, as
/// enabled by the config.
Var embed_tokens(const Var& projected_map, const SharedEmbeddings& shared, const FgdConfig& cfg);

class HybridEmbedding {
 public:
  HybridEmbedding() = default;
  HybridEmbedding(ParameterSet& params, Initializer& init, int in_channels,
                  const SharedEmbeddings& shared, const FgdConfig& cfg);
  Var operator()(const Var& stage_map) const;

  Conv2d projection;

 private:
  SharedEmbeddings shared_;
  FgdConfig cfg_;
};

class FocusBlock {
 public:
  FocusBlock() = default;
  FocusBlock(ParameterSet& params, Initializer& init, int stage, int channels, int window,
             int last_edge, const SharedEmbeddings& shared, const FgdConfig& cfg);

  GuidancePair operator()(const Var& stage_map) const { return guide(attend(stage_map)); }
  /// Attention module only.
  Var attend(const Var& stage_map) const;
  /// Dual pooling, 1x1 projections and embedding of an attended map.
  GuidancePair guide(const Var& attended) const;

  int stage() const { return stage_; }
  Conv2d proj_max, proj_avg;
  SeBlock se;
  CbamBlock cbam;

 private:
  int stage_ = 0;
  int window_ = 1;
  int last_edge_ = 1;
  SharedEmbeddings shared_;
  FgdConfig cfg_;
};

/// Multi-head attention with separately projected query, key and value
/// sources. Self-attention passes one stream three times; guided attention
/// takes queries and keys from focus-block guidance.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, Initializer& init, const std::string& name, int dim,
                     int heads, bool paper_literal_scaling);

  /// weights_out, when given, receives the [B, h, Tq, Tk] attention weights.
  Var operator()(const Var& query_src, const Var& key_src, const Var& value_src,
                 Tensor* weights_out = nullptr) const;

  Linear query, key, value, out;
  int heads = 1;
  bool paper_literal_scaling = false;
};

Var mhsa(const MultiHeadAttention& attn, const Var& tokens, Tensor* weights_out = nullptr);
Var mhga(const MultiHeadAttention& attn, const Var& stream, const GuidancePair& guidance,
         Tensor* weights_out = nullptr);

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterSet& params, Initializer& init, const std::string& name, int dim,
              int hidden);
  Var operator()(const Var& x, double dropout, const ForwardContext& ctx) const;

  Linear fc1, fc2;
};

struct DecoderTrace {
  Tensor self_weights;
  Tensor guided_weights;
};

/// Pre-norm decoder: MHSA, FFN, MHGA, FFN, each wrapped in a residual.
class FgdDecoder {
 public:
  FgdDecoder() = default;
  FgdDecoder(ParameterSet& params, Initializer& init, const std::string& name,
             const FgdConfig& cfg);
  Var operator()(const Var& z, const GuidancePair& guidance, const ForwardContext& ctx,
                 DecoderTrace* trace = nullptr) const;

  LayerNorm norm_self, norm_ffn1, norm_guided, norm_ffn2;
  MultiHeadAttention self_attention, guided_attention;
  FeedForward ffn1, ffn2;

 private:
  double dropout_ = 0.0;
};

/// Pre-norm encoder block (MHSA then FFN).
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParameterSet& params, Initializer& init, const std::string& name,
               const FgdConfig& cfg);
  Var operator()(const Var& z, const ForwardContext& ctx, Tensor* weights_out = nullptr) const;

  LayerNorm norm_self, norm_ffn;
  MultiHeadAttention self_attention;
  FeedForward ffn;

 private:
  double dropout_ = 0.0;
};

/// Reads the class token (or the token mean when the class token is off),
/// normalizes it and maps to class logits.
class ClassificationHead {
 public:
  ClassificationHead() = default;
  ClassificationHead(ParameterSet& params, Initializer& init, const FgdConfig& cfg);
  Var operator()(const Var& z) const;

  LayerNorm norm;
  Linear fc;

 private:
  bool use_class_token_ = true;
};

}  // namespace msht
