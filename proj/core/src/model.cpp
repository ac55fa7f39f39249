#include "msht/model.hpp"

#include <array>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "msht/seed.hpp"

namespace msht {

namespace {

constexpr std::array<Variant, 8> kVariants{Variant::msht,         Variant::hybrid1,
                                           Variant::hybrid3,      Variant::no_cls_token,
                                           Variant::no_pos_emb,   Variant::no_att,
                                           Variant::se_att,       Variant::cbam_att};

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::msht: return "MSHT";
    case Variant::hybrid1: return "Hybrid1";
    case Variant::hybrid3: return "Hybrid3";
    case Variant::no_cls_token: return "No_CLS_Token";
    case Variant::no_pos_emb: return "No_Pos_emb";
    case Variant::no_att: return "No_ATT";
    case Variant::se_att: return "SE_ATT";
    case Variant::cbam_att: return "CBAM_ATT";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (auto v : kVariants) {
    if (to_string(v) == name) return v;
  }
  std::string valid;
  for (auto v : kVariants) valid += (valid.empty() ? "" : ", ") + to_string(v);
  throw std::invalid_argument("unknown variant '" + name + "' (valid: " + valid + ")");
}

std::span<const Variant> all_variants() { return kVariants; }

ModelConfig ModelConfig::full() { return {BackboneConfig::full(), FgdConfig::full()}; }

ModelConfig ModelConfig::tiny() { return {BackboneConfig::tiny(), FgdConfig::tiny()}; }

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["backbone"] = {{"in_channels", backbone.in_channels},
                   {"input_edge", backbone.input_edge},
                   {"stem_channels", backbone.stem_channels},
                   {"stage_channels", backbone.stage_channels},
                   {"block_counts", backbone.block_counts},
                   {"expansion", backbone.expansion}};
  j["fgd"] = {{"token_dim", fgd.token_dim},
              {"heads", fgd.heads},
              {"patch_size", fgd.patch_size},
              {"pool_windows", fgd.pool_windows},
              {"ffn_hidden", fgd.ffn_hidden},
              {"num_classes", fgd.num_classes},
              {"attention", to_string(fgd.attention)},
              {"simam_lambda", fgd.simam_lambda},
              {"attention_reduction", fgd.attention_reduction},
              {"use_class_token", fgd.use_class_token},
              {"use_positional_encoding", fgd.use_positional_encoding},
              {"stage_count", fgd.stage_count},
              {"paper_literal_scaling", fgd.paper_literal_scaling},
              {"dropout", fgd.dropout}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  const auto& b = j.at("backbone");
  c.backbone.in_channels = b.at("in_channels");
  c.backbone.input_edge = b.at("input_edge");
  c.backbone.stem_channels = b.at("stem_channels");
  c.backbone.stage_channels = b.at("stage_channels").get<std::vector<int>>();
  c.backbone.block_counts = b.at("block_counts").get<std::vector<int>>();
  c.backbone.expansion = b.at("expansion");
  const auto& f = j.at("fgd");
  c.fgd.token_dim = f.at("token_dim");
  c.fgd.heads = f.at("heads");
  c.fgd.patch_size = f.at("patch_size");
  c.fgd.pool_windows = f.at("pool_windows").get<std::vector<int>>();
  c.fgd.ffn_hidden = f.at("ffn_hidden");
  c.fgd.num_classes = f.at("num_classes");
  c.fgd.attention = parse_attention_variant(f.at("attention").get<std::string>());
  c.fgd.simam_lambda = f.at("simam_lambda");
  c.fgd.attention_reduction = f.at("attention_reduction");
  c.fgd.use_class_token = f.at("use_class_token");
  c.fgd.use_positional_encoding = f.at("use_positional_encoding");
  c.fgd.stage_count = f.at("stage_count");
  c.fgd.paper_literal_scaling = f.at("paper_literal_scaling");
  c.fgd.dropout = f.at("dropout");
  return c;
}

ModelConfig variant_config(Variant variant, const ModelConfig& base) {
  ModelConfig c = base;
  switch (variant) {
    case Variant::msht:
    case Variant::hybrid1:
      break;
    case Variant::hybrid3: {
      // Drop the last backbone stage; the token grid follows stage 3.
      c.fgd.stage_count = 3;
      const auto edges = c.backbone.stage_edge_sizes();
      c.fgd.pool_windows = {edges[0] / edges[2], edges[1] / edges[2], 1};
      break;
    }
    case Variant::no_cls_token: c.fgd.use_class_token = false; break;
    case Variant::no_pos_emb: c.fgd.use_positional_encoding = false; break;
    case Variant::no_att: c.fgd.attention = AttentionVariant::none; break;
    case Variant::se_att: c.fgd.attention = AttentionVariant::se; break;
    case Variant::cbam_att: c.fgd.attention = AttentionVariant::cbam; break;
  }
  return c;
}

Model::Model(Variant variant, ModelConfig config, std::uint64_t seed)
    : variant_(variant),
      config_(std::move(config)),
      seed_(seed),
      backbone_(config_.backbone, derive_seed(seed, 0), config_.fgd.stage_count) {
  const FgdConfig& f = config_.fgd;
  const auto edges = config_.backbone.stage_edge_sizes();
  f.validate(edges);
  const int last_edge = edges[static_cast<std::size_t>(f.stage_count - 1)];
  const int last_channels = config_.backbone.stage_channels[static_cast<std::size_t>(f.stage_count - 1)];

  Initializer init(derive_seed(seed, 1));
  shared_.class_token = params_.add("fgd.class_token", Tensor::zeros({1, f.token_dim}));
  shared_.positional =
      params_.add("fgd.pos_embed", init.normal({f.sequence_length(last_edge), f.token_dim}, 0.02));
  embedding_ = HybridEmbedding(params_, init, last_channels, shared_, f);

  if (variant_ == Variant::hybrid1) {
    const int blocks = 2 * f.stage_count;
    for (int i = 0; i < blocks; ++i) {
      encoders_.emplace_back(params_, init, "fgd.encoder" + std::to_string(i + 1), f);
    }
  } else {
    for (int l = 0; l < f.stage_count; ++l) {
      focus_.emplace_back(params_, init, l + 1, config_.backbone.stage_channels[l],
                          f.pool_windows[l], last_edge, shared_, f);
    }
    for (int l = 0; l < f.stage_count; ++l) {
      decoders_.emplace_back(params_, init, "fgd.decoder" + std::to_string(l + 1), f);
    }
  }
  head_ = ClassificationHead(params_, init, f);
}

Var Model::logits(const Var& images, const ForwardContext& ctx, ForwardTrace* trace) const {
  StageFeatures stages = backbone_.forward(images, ctx.training);
  Var z = embedding_(stages.maps.back());
  if (trace) {
    trace->embedded = z;
    trace->guidance.clear();
    trace->block_outputs.clear();
    trace->attention.clear();
  }
  if (variant_ == Variant::hybrid1) {
    for (const auto& enc : encoders_) {
      DecoderTrace dt;
      z = enc(z, ctx, trace ? &dt.self_weights : nullptr);
      if (trace) {
        trace->block_outputs.push_back(z);
        trace->attention.push_back(std::move(dt));
      }
    }
  } else {
    for (std::size_t l = 0; l < decoders_.size(); ++l) {
      const GuidancePair g = focus_[l](stages.maps[l]);
      DecoderTrace dt;
      z = decoders_[l](z, g, ctx, trace ? &dt : nullptr);
      if (trace) {
        trace->guidance.push_back(g);
        trace->block_outputs.push_back(z);
        trace->attention.push_back(std::move(dt));
      }
    }
  }
  if (trace) trace->stages = std::move(stages);
  return head_(z);
}

Var Model::confidences(const Var& images, const ForwardContext& ctx, ForwardTrace* trace) const {
  return ops::softmax(logits(images, ctx, trace));
}

Tensor Model::predict(const Tensor& images) const {
  NoGradGuard guard;
  return confidences(Var(images), ForwardContext{}).value();
}

std::vector<Parameter> Model::parameters() const {
  std::vector<Parameter> all = backbone_.parameters().entries();
  const auto& rest = params_.entries();
  all.insert(all.end(), rest.begin(), rest.end());
  return all;
}

std::int64_t Model::parameter_count() const {
  return backbone_.parameters().trainable_count() + params_.trainable_count();
}

Model build_variant(Variant variant, const ModelConfig& base, std::uint64_t seed) {
  return Model(variant, variant_config(variant, base), seed);
}

Model build_variant(const std::string& variant, const ModelConfig& base, std::uint64_t seed) {
  return build_variant(parse_variant(variant), base, seed);
}

ParameterArchive checkpoint_archive(const Model& model) {
  ParameterArchive ar = to_archive(model.parameters());
  ar.set_metadata("variant", to_string(model.variant()));
  ar.set_metadata("model_config", model.config().to_json());
  ar.set_metadata("seed", std::to_string(model.seed()));
  return ar;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  checkpoint_archive(model).save(path);
}

Model model_from_checkpoint(const ParameterArchive& archive) {
  const std::string* variant = archive.metadata("variant");
  const std::string* config = archive.metadata("model_config");
  if (!variant || !config) throw ArchiveError("archive is not a model checkpoint");
  const std::string* seed = archive.metadata("seed");
  Model model(parse_variant(*variant), ModelConfig::from_json(*config),
              seed ? std::stoull(*seed) : 0);
  restore_checkpoint(model, archive);
  return model;
}

Model load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint(ParameterArchive::load(path));
}

void restore_checkpoint(Model& model, const ParameterArchive& archive) {
  const std::string* variant = archive.metadata("variant");
  const std::string* config = archive.metadata("model_config");
  if (!variant || !config) throw ArchiveError("archive is not a model checkpoint");
  if (*variant != to_string(model.variant())) {
    throw ArchiveError("checkpoint variant " + *variant + " does not match model variant " +
                       to_string(model.variant()));
  }
  if (ModelConfig::from_json(*config).to_json() != model.config().to_json()) {
    throw ArchiveError("checkpoint model configuration differs from the target model");
  }
  const LoadReport report = load_parameters(model.parameters(), archive);
  if (!report.missing.empty() || !report.unexpected.empty()) {
    throw ArchiveError("checkpoint parameter set differs: " +
                       std::to_string(report.missing.size()) + " missing, " +
                       std::to_string(report.unexpected.size()) + " unexpected");
  }
}

}  // namespace msht
