#include <gtest/gtest.h>

#include "msht/backbone.hpp"
#include "oracles.hpp"

using namespace msht;

TEST(Backbone, TinyStageShapes) {
  const BackboneConfig cfg = BackboneConfig::tiny();
  EXPECT_EQ(cfg.stage_edge_sizes(), (std::vector<int>{16, 8, 4, 2}));
  const Backbone bb(cfg, 1);
  std::mt19937_64 rng(1);
  NoGradGuard g;
  const auto f = bb.forward(Var(oracle::random_tensor({2, 3, 64, 64}, rng)), false);
  ASSERT_EQ(f.maps.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    const std::int64_t e = cfg.stage_edge_sizes()[l];
    EXPECT_EQ(f.maps[l].shape(), (Shape{2, cfg.stage_channels[l], e, e})) << "stage " << l + 1;
  }
}

TEST(Backbone, FullEdgesFollowTheStride) {
  EXPECT_EQ(BackboneConfig::full().stage_edge_sizes(), (std::vector<int>{96, 48, 24, 12}));
}

TEST(Backbone, ActiveStagesLimitsOutput) {
  const Backbone bb(BackboneConfig::tiny(), 1, 3);
  NoGradGuard g;
  EXPECT_EQ(bb.forward(Var(Tensor({1, 3, 64, 64})), false).maps.size(), 3u);
  for (const auto& p : bb.parameters().entries()) EXPECT_EQ(p.name.find("stage4"), std::string::npos);
  EXPECT_THROW(Backbone(BackboneConfig::tiny(), 1, 5), std::invalid_argument);
}

TEST(Backbone, ParameterNamesAndBuffers) {
  const Backbone bb(BackboneConfig::tiny(), 1);
  EXPECT_NE(bb.parameters().find("backbone.stem.conv.weight"), nullptr);
  const Parameter* rv = bb.parameters().find("backbone.stage1.block0.bn1.running_var");
  ASSERT_NE(rv, nullptr);
  EXPECT_FALSE(rv->trainable);
  EXPECT_NE(bb.parameters().find("backbone.stage2.block0.downsample.weight"), nullptr);
}

TEST(Backbone, SameSeedSameWeights) {
  const Backbone a(BackboneConfig::tiny(), 9), b(BackboneConfig::tiny(), 9), c(BackboneConfig::tiny(), 10);
  const auto& pa = a.parameters().entries();
  const auto& pb = b.parameters().entries();
  const auto& pc = c.parameters().entries();
  ASSERT_EQ(pa.size(), pb.size());
  double diff_c = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(max_abs_diff(pa[i].var.value(), pb[i].var.value()), 0.0);
    diff_c = std::max(diff_c, max_abs_diff(pa[i].var.value(), pc[i].var.value()));
  }
  EXPECT_GT(diff_c, 0.0);
}

TEST(Backbone, RejectsWrongInput) {
  const Backbone bb(BackboneConfig::tiny(), 1);
  NoGradGuard g;
  EXPECT_THROW(bb.forward(Var(Tensor({1, 1, 64, 64})), false), ShapeError);
  EXPECT_THROW(bb.forward(Var(Tensor({1, 3, 32, 32})), false), ShapeError);
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c = BackboneConfig::tiny();
  c.input_edge = 48;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = BackboneConfig::tiny();
  c.block_counts = {1, 1, 1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Backbone, PretrainedLoadReportsMissingNames) {
  Backbone bb(BackboneConfig::tiny(), 1);
  ParameterArchive ar;
  ar.put("backbone.stem.conv.weight", Tensor({16, 3, 7, 7}, 0.5));
  const LoadReport r = load_pretrained_stem(bb, ar);
  EXPECT_EQ(r.loaded.size(), 1u);
  EXPECT_FALSE(r.missing.empty());
  EXPECT_DOUBLE_EQ(bb.parameters().find("backbone.stem.conv.weight")->var.value()[0], 0.5);
  ParameterArchive bad;
  bad.put("backbone.stem.conv.weight", Tensor({1}));
  EXPECT_THROW(load_pretrained_stem(bb, bad), ArchiveError);
}
