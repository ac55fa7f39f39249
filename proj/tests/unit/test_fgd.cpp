#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "msht/fgd.hpp"
#include "msht/model.hpp"
#include "oracles.hpp"

using namespace msht;
using oracle::random_tensor;

namespace {

MultiHeadAttention make_attention(int dim, int heads, bool literal, std::uint64_t seed,
                                  ParameterSet& ps) {
  Initializer init(seed);
  MultiHeadAttention a(ps, init, "attn", dim, heads, literal);
  // Non-zero biases so the oracle exercises them too.
  std::mt19937_64 rng(seed + 1);
  for (Linear* l : {&a.query, &a.key, &a.value, &a.out}) l->bias.mutable_value() = random_tensor({dim}, rng, -0.1, 0.1);
  return a;
}

}  // namespace

TEST(Attention, SelfAttentionMatchesOracle) {
  for (bool literal : {false, true}) {
    ParameterSet ps;
    const auto attn = make_attention(8, 2, literal, 3, ps);
    std::mt19937_64 rng(4);
    const Tensor x = random_tensor({2, 5, 8}, rng, -2, 2);
    Tensor w_lib, w_ref;
    const Tensor y = mhsa(attn, Var(x), &w_lib).value();
    const Tensor ref = oracle::attention(oracle::weights_of(attn), x, x, x, &w_ref);
    EXPECT_LT(max_abs_diff(y, ref), 1e-12) << "literal=" << literal;
    EXPECT_LT(max_abs_diff(w_lib, w_ref), 1e-12);
  }
}

TEST(Attention, GuidedAttentionTakesQueriesAndKeysFromGuidance) {
  ParameterSet ps;
  const auto attn = make_attention(8, 4, false, 5, ps);
  std::mt19937_64 rng(6);
  const Tensor z = random_tensor({1, 4, 8}, rng), gq = random_tensor({1, 4, 8}, rng),
               gk = random_tensor({1, 4, 8}, rng);
  GuidancePair g{Var(gq), Var(gk), 2};
  const Tensor y = mhga(attn, Var(z), g).value();
  EXPECT_LT(max_abs_diff(y, oracle::attention(oracle::weights_of(attn), gq, gk, z)), 1e-12);
}

TEST(Attention, WeightRowsSumToOne) {
  ParameterSet ps;
  const auto attn = make_attention(12, 3, false, 7, ps);
  std::mt19937_64 rng(8);
  Tensor w;
  mhsa(attn, Var(random_tensor({2, 6, 12}, rng, -10, 10)), &w);
  ASSERT_EQ(w.shape(), (Shape{2, 3, 6, 6}));
  for (std::int64_t r = 0; r < w.numel() / 6; ++r) {
    double s = 0;
    for (int j = 0; j < 6; ++j) {
      s += w[r * 6 + j];
      EXPECT_GE(w[r * 6 + j], 0.0);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, LiteralScalingShrinksValuesNotJustLogits) {
  ParameterSet p1, p2;
  const auto plain = make_attention(8, 2, false, 9, p1);
  auto literal = make_attention(8, 2, true, 9, p2);
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({1, 3, 8}, rng);
  const Tensor a = mhsa(plain, Var(x)).value();
  const Tensor b = mhsa(literal, Var(x)).value();
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
}

TEST(Attention, SelfAttentionIsPermutationEquivariant) {
  ParameterSet ps;
  const auto attn = make_attention(8, 2, false, 11, ps);
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor({1, 4, 8}, rng);
  const std::vector<int> perm{2, 0, 3, 1};
  Tensor xp({1, 4, 8});
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < 8; ++d) xp.at({0, t, d}) = x.at({0, perm[t], d});
  const Tensor y = mhsa(attn, Var(x)).value();
  const Tensor yp = mhsa(attn, Var(xp)).value();
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < 8; ++d) EXPECT_NEAR(yp.at({0, t, d}), y.at({0, perm[t], d}), 1e-12);
}

TEST(Attention, RejectsNonFiniteAndMisshapedInput) {
  ParameterSet ps;
  const auto attn = make_attention(8, 2, false, 13, ps);
  Tensor x({1, 3, 8});
  x[4] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(mhsa(attn, Var(x)), std::domain_error);
  EXPECT_THROW(mhsa(attn, Var(Tensor({3, 8}))), ShapeError);
  Initializer init(1);
  EXPECT_THROW(MultiHeadAttention(ps, init, "bad", 10, 3, false), std::invalid_argument);
}

TEST(Attention, GuidanceMismatchNamesTheStage) {
  ParameterSet ps;
  const auto attn = make_attention(8, 2, false, 14, ps);
  GuidancePair g{Var(Tensor({1, 5, 8})), Var(Tensor({1, 5, 8})), 3};
  try {
    mhga(attn, Var(Tensor({1, 4, 8})), g);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 3"), std::string::npos) << e.what();
  }
}

TEST(Decoder, ZeroedOutputProjectionsMakeItTheIdentity) {
  ParameterSet ps;
  Initializer init(15);
  const FgdConfig cfg = FgdConfig::tiny();
  FgdDecoder dec(ps, init, "dec", cfg);
  for (Linear* l : {&dec.self_attention.out, &dec.guided_attention.out, &dec.ffn1.fc2, &dec.ffn2.fc2}) {
    l->weight.mutable_value().fill(0.0);
    l->bias.mutable_value().fill(0.0);
  }
  std::mt19937_64 rng(16);
  const Tensor z = random_tensor({2, 5, cfg.token_dim}, rng);
  GuidancePair g{Var(random_tensor({2, 5, cfg.token_dim}, rng)), Var(random_tensor({2, 5, cfg.token_dim}, rng)), 1};
  EXPECT_EQ(max_abs_diff(dec(Var(z), g, {}).value(), z), 0.0);
}

TEST(Decoder, MatchesComposedOracle) {
  ParameterSet ps;
  Initializer init(17);
  FgdConfig cfg = FgdConfig::tiny();
  cfg.token_dim = 8;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  FgdDecoder dec(ps, init, "dec", cfg);
  std::mt19937_64 rng(18);
  const Tensor z = random_tensor({1, 3, 8}, rng), gq = random_tensor({1, 3, 8}, rng),
               gk = random_tensor({1, 3, 8}, rng);
  const auto ln = [](const Tensor& x) {
    Tensor y(x.shape());
    const auto d = x.dim(-1);
    for (std::int64_t r = 0; r < x.numel() / d; ++r) {
      double m = 0, v = 0;
      for (std::int64_t i = 0; i < d; ++i) m += x[r * d + i] / d;
      for (std::int64_t i = 0; i < d; ++i) v += (x[r * d + i] - m) * (x[r * d + i] - m) / d;
      for (std::int64_t i = 0; i < d; ++i) y[r * d + i] = (x[r * d + i] - m) / std::sqrt(v + 1e-6);
    }
    return y;
  };
  const auto ffn = [](const FeedForward& f, const Tensor& x) {
    const Tensor& w1 = f.fc1.weight.value();
    const Tensor& w2 = f.fc2.weight.value();
    Tensor y(x.shape());
    const auto d = x.dim(-1), hdim = w1.dim(0);
    for (std::int64_t r = 0; r < x.numel() / d; ++r) {
      std::vector<double> h(hdim);
      for (std::int64_t j = 0; j < hdim; ++j) {
        double s = f.fc1.bias.value()[j];
        for (std::int64_t i = 0; i < d; ++i) s += w1.at({j, i}) * x[r * d + i];
        h[j] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
      }
      for (std::int64_t o = 0; o < d; ++o) {
        double s = f.fc2.bias.value()[o];
        for (std::int64_t j = 0; j < hdim; ++j) s += w2.at({o, j}) * h[j];
        y[r * d + o] = s;
      }
    }
    return y;
  };
  const auto add = [](Tensor a, const Tensor& b) {
    for (std::int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
    return a;
  };
  const auto sa = oracle::weights_of(dec.self_attention);
  const auto ga = oracle::weights_of(dec.guided_attention);
  const Tensor n0 = ln(z);
  const Tensor z1 = add(oracle::attention(sa, n0, n0, n0), z);
  const Tensor z2 = add(ffn(dec.ffn1, ln(z1)), z1);
  const Tensor z3 = add(oracle::attention(ga, gq, gk, ln(z2)), z2);
  const Tensor want = add(ffn(dec.ffn2, ln(z3)), z3);
  GuidancePair g{Var(gq), Var(gk), 1};
  EXPECT_LT(max_abs_diff(dec(Var(z), g, {}).value(), want), 1e-10);
}

TEST(FocusBlock, ConstantMapGivesEqualQueryAndKeyWithTiedProjections) {
  const Model m = build_variant(Variant::no_att, ModelConfig::tiny(), 1);
  FocusBlock fb = m.focus_blocks()[0];
  fb.proj_avg.weight.mutable_value() = fb.proj_max.weight.value();
  fb.proj_avg.bias.mutable_value() = fb.proj_max.bias.value();
  const GuidancePair g = fb(Var(Tensor({1, 16, 16, 16}, 0.7)));
  EXPECT_EQ(g.q.shape(), (Shape{1, 5, 64}));
  EXPECT_LT(max_abs_diff(g.q.value(), g.k.value()), 1e-12);  // avg pool sums 64 terms
}

TEST(FocusBlock, PoolsEveryStageToTheLastStageGrid) {
  const Model m = build_variant(Variant::msht, ModelConfig::tiny(), 2);
  ForwardTrace trace;
  NoGradGuard ng;
  m.logits(Var(Tensor({1, 3, 64, 64}, 0.1)), {}, &trace);
  ASSERT_EQ(trace.guidance.size(), 4u);
  for (const auto& g : trace.guidance) {
    EXPECT_EQ(g.q.shape(), trace.embedded.shape()) << "stage " << g.stage;
    EXPECT_EQ(g.k.shape(), trace.embedded.shape());
  }
}

TEST(FocusBlock, WrongMapSizeNamesTheStage) {
  const Model m = build_variant(Variant::msht, ModelConfig::tiny(), 3);
  try {
    m.focus_blocks()[1](Var(Tensor({1, 32, 6, 6})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 2"), std::string::npos) << e.what();
  }
}

TEST(SharedEmbeddings, ClassTokenStartsAtZeroAndPositionalIsShared) {
  Model m = build_variant(Variant::msht, ModelConfig::tiny(), 4);
  for (double v : m.shared().class_token.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(m.shared().positional.shape(), (Shape{5, 64}));
  // The same node feeds the embedding and every focus block, so gradients
  // from all four guidance paths and the stream meet on one parameter.
  int registered = 0;
  for (const auto& p : m.parameters())
    if (p.var.same_node(m.shared().positional)) ++registered;
  EXPECT_EQ(registered, 1);

  const Tensor image({1, 3, 64, 64}, 0.2);
  ForwardTrace base;
  {
    NoGradGuard ng;
    m.logits(Var(image), {}, &base);
  }
  m.shared().positional.mutable_value().fill(0.0);
  ForwardTrace shifted;
  {
    NoGradGuard ng;
    m.logits(Var(image), {}, &shifted);
  }
  EXPECT_GT(max_abs_diff(base.embedded.value(), shifted.embedded.value()), 0.0);
  for (std::size_t l = 0; l < 4; ++l)
    EXPECT_GT(max_abs_diff(base.guidance[l].q.value(), shifted.guidance[l].q.value()), 0.0);
}

TEST(FgdConfig, ValidationNamesTheProblem) {
  FgdConfig c = FgdConfig::tiny();
  c.heads = 5;
  EXPECT_THROW(c.validate({16, 8, 4, 2}), std::invalid_argument);
  c = FgdConfig::tiny();
  c.pool_windows = {8, 4, 2, 2};
  EXPECT_THROW(c.validate({16, 8, 4, 2}), std::invalid_argument);
  c = FgdConfig::tiny();
  EXPECT_NO_THROW(c.validate({16, 8, 4, 2}));
  EXPECT_EQ(c.patch_count(2), 4);
  EXPECT_EQ(c.sequence_length(2), 5);
  EXPECT_EQ(FgdConfig::full().sequence_length(12), 145);
}
