#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msht/archive.hpp"
#include "msht/backbone.hpp"
#include "msht/fgd.hpp"

namespace msht {

/// Architecture variants: the full model and its ablations.
enum class Variant { msht, hybrid1, hybrid3, no_cls_token, no_pos_emb, no_att, se_att, cbam_att };

std::string to_string(Variant v);
/// Accepts the canonical names (MSHT, Hybrid1, Hybrid3, No_CLS_Token,
/// No_Pos_emb, No_ATT, SE_ATT, CBAM_ATT); the error lists them.
Variant parse_variant(const std::string& name);
std::span<const Variant> all_variants();

struct ModelConfig {
  BackboneConfig backbone;
  FgdConfig fgd;

  static ModelConfig full();
  static ModelConfig tiny();

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

/// Applies a variant's switches to a base configuration.
ModelConfig variant_config(Variant variant, const ModelConfig& base);

/// Intermediate values of one forward pass.
struct ForwardTrace {
  StageFeatures stages;
  Var embedded;
  std::vector<GuidancePair> guidance;
  std::vector<Var> block_outputs;  // one per decoder or encoder block
  std::vector<DecoderTrace> attention;
};

class Model {
 public:
  /// config is used as given; see build_variant for variant switches.
  Model(Variant variant, ModelConfig config, std::uint64_t seed);

  Var logits(const Var& images, const ForwardContext& ctx, ForwardTrace* trace = nullptr) const;
  /// Softmax class confidences; rows sum to one.
  Var confidences(const Var& images, const ForwardContext& ctx,
                  ForwardTrace* trace = nullptr) const;
  /// Inference-mode confidences without graph recording.
  Tensor predict(const Tensor& images) const;

  std::vector<Parameter> parameters() const;
  std::int64_t parameter_count() const;

  Variant variant() const { return variant_; }
  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  const Backbone& backbone() const { return backbone_; }
  SharedEmbeddings& shared() { return shared_; }
  const SharedEmbeddings& shared() const { return shared_; }
  const HybridEmbedding& embedding() const { return embedding_; }
  const std::vector<FocusBlock>& focus_blocks() const { return focus_; }
  const std::vector<FgdDecoder>& decoders() const { return decoders_; }
  const std::vector<EncoderBlock>& encoders() const { return encoders_; }
  const ClassificationHead& head() const { return head_; }

 private:
  Variant variant_;
  ModelConfig config_;
  std::uint64_t seed_;
  Backbone backbone_;
  ParameterSet params_;  // everything past the backbone
  SharedEmbeddings shared_;
  HybridEmbedding embedding_;
  std::vector<FocusBlock> focus_;
  std::vector<FgdDecoder> decoders_;
  std::vector<EncoderBlock> encoders_;
  ClassificationHead head_;
};

/// Builds a variant from a base configuration (the variant's switches are
/// applied on top of it).
Model build_variant(Variant variant, const ModelConfig& base, std::uint64_t seed);
Model build_variant(const std::string& variant, const ModelConfig& base, std::uint64_t seed);

/// Parameters plus "variant", "model_config" and "seed" metadata.
ParameterArchive checkpoint_archive(const Model& model);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model model_from_checkpoint(const ParameterArchive& archive);
Model load_checkpoint(const std::filesystem::path& path);
/// Verifies the archive was written by a compatible model, then loads it.
void restore_checkpoint(Model& model, const ParameterArchive& archive);

}  // namespace msht
