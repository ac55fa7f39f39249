#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "msht/ops.hpp"
#include "oracles.hpp"

using namespace msht;
using oracle::random_tensor;

namespace {

using OpFn = std::function<Var(const std::vector<Var>&)>;

// Checks every entry of every input against central differences of
// sum(op(inputs) * R) for a fixed random R.
double max_grad_error(const OpFn& op, const std::vector<Tensor>& inputs, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  Tensor weights;
  {
    NoGradGuard g;
    weights = random_tensor(op(vars).shape(), rng);
  }
  const auto loss = [&] { return ops::sum(ops::mul(op(vars), Var(weights))); };
  double worst = 0.0;
  for (auto& v : vars) {
    std::vector<std::int64_t> all;
    for (std::int64_t i = 0; i < v.value().numel(); ++i) all.push_back(i);
    for (auto& other : vars) other.zero_grad();
    worst = std::max(worst, oracle::finite_difference(v, loss, all, 1e-6).max_relative_error);
  }
  return worst;
}

Tensor rnd(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return random_tensor(std::move(s), rng, lo, hi);
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(OpsGradient, Elementwise) {
  const Tensor a = rnd({2, 3}, 1), b = rnd({2, 3}, 2);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::add(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::sub(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::mul(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::scale(v[0], -1.7); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::gelu(v[0]); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::sigmoid(v[0]); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::relu(v[0]); }, {a}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::mean(v[0]); }, {a}), kTol);
}

TEST(OpsGradient, MatmulAndLinear) {
  EXPECT_LT(max_grad_error([](auto& v) { return ops::matmul(v[0], v[1]); },
                           {rnd({2, 3, 4}, 3), rnd({2, 4, 5}, 4)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::matmul(v[0], v[1], true, true); },
                           {rnd({2, 4, 3}, 5), rnd({2, 5, 4}, 6)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::matmul(v[0], v[1]); },
                           {rnd({2, 3, 4}, 7), rnd({4, 2}, 8)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::linear(v[0], v[1], v[2]); },
                           {rnd({2, 3, 4}, 9), rnd({5, 4}, 10), rnd({5}, 11)}),
            kTol);
}

TEST(OpsGradient, Convolution) {
  EXPECT_LT(max_grad_error([](auto& v) { return ops::conv2d(v[0], v[1], v[2], {2, 1}); },
                           {rnd({2, 3, 5, 5}, 12), rnd({4, 3, 3, 3}, 13), rnd({4}, 14)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::conv2d(v[0], v[1], Var(), {1, 0}); },
                           {rnd({1, 3, 4, 4}, 15), rnd({2, 3, 1, 1}, 16)}),
            kTol);
}

TEST(OpsGradient, Normalization) {
  Tensor rm({3}), rv({3}, 1.0);
  EXPECT_LT(max_grad_error(
                [&](auto& v) { return ops::batch_norm2d(v[0], v[1], v[2], rm, rv, true); },
                {rnd({2, 3, 3, 3}, 17), rnd({3}, 18), rnd({3}, 19)}),
            1e-5);
  EXPECT_LT(max_grad_error([&](auto& v) { return ops::batch_norm2d(v[0], v[1], v[2], rm, rv, false); },
                           {rnd({2, 3, 3, 3}, 20), rnd({3}, 21), rnd({3}, 22)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); },
                           {rnd({2, 3, 6}, 23), rnd({6}, 24), rnd({6}, 25)}),
            1e-5);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::softmax(v[0]); }, {rnd({2, 3, 5}, 26)}), kTol);
}

TEST(OpsGradient, Pooling) {
  EXPECT_LT(max_grad_error([](auto& v) { return ops::max_pool2d(v[0], 3, 2, 1); }, {rnd({1, 2, 6, 6}, 27)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::avg_pool2d(v[0], 2, 2); }, {rnd({1, 2, 4, 4}, 28)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::global_avg_pool(v[0]); }, {rnd({2, 3, 3, 3}, 29)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::global_max_pool(v[0]); }, {rnd({2, 3, 3, 3}, 30)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::channel_mean(v[0]); }, {rnd({2, 3, 3, 3}, 31)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::channel_max(v[0]); }, {rnd({2, 3, 3, 3}, 32)}), kTol);
}

TEST(OpsGradient, ChannelAndTokenPlumbing) {
  EXPECT_LT(max_grad_error([](auto& v) { return ops::concat_channels(v[0], v[1]); },
                           {rnd({2, 2, 3, 3}, 33), rnd({2, 1, 3, 3}, 34)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::scale_channels(v[0], v[1]); },
                           {rnd({2, 3, 2, 2}, 35), rnd({2, 3}, 36)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::scale_spatial(v[0], v[1]); },
                           {rnd({2, 3, 2, 2}, 37), rnd({2, 1, 2, 2}, 38)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::map_to_tokens(v[0]); }, {rnd({2, 3, 2, 2}, 39)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::prepend_token(v[0], v[1]); },
                           {rnd({2, 4, 3}, 40), rnd({1, 3}, 41)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::add_positional(v[0], v[1]); },
                           {rnd({2, 4, 3}, 42), rnd({4, 3}, 43)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::select_token(v[0], 1); }, {rnd({2, 4, 3}, 44)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::mean_tokens(v[0]); }, {rnd({2, 4, 3}, 45)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::merge_heads(ops::split_heads(v[0], 2)); },
                           {rnd({2, 3, 4}, 46)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::reshape(v[0], {6, 2}); }, {rnd({2, 3, 2}, 47)}), kTol);
}

TEST(OpsGradient, SimamAndCrossEntropy) {
  EXPECT_LT(max_grad_error([](auto& v) { return ops::simam(v[0], 1e-4); }, {rnd({2, 2, 3, 3}, 48)}), 1e-5);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::cross_entropy(v[0], {0, 1, 1}); }, {rnd({3, 2}, 49)}), kTol);
  EXPECT_LT(max_grad_error([](auto& v) { return ops::cross_entropy(v[0], {0, 1, 1}, {2.0, 0.5}); },
                           {rnd({3, 2}, 50)}),
            kTol);
}

TEST(OpsForward, ConvolutionMatchesDirectSum) {
  const Tensor x = rnd({1, 2, 5, 5}, 51), w = rnd({3, 2, 3, 3}, 52), b = rnd({3}, 53);
  const Tensor y = ops::conv2d(Var(x), Var(w), Var(b), {2, 1}).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (std::int64_t o = 0; o < 3; ++o)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 3; ++j) {
        double s = b[o];
        for (std::int64_t c = 0; c < 2; ++c)
          for (std::int64_t ky = 0; ky < 3; ++ky)
            for (std::int64_t kx = 0; kx < 3; ++kx) {
              const std::int64_t yy = i * 2 - 1 + ky, xx = j * 2 - 1 + kx;
              if (yy < 0 || yy >= 5 || xx < 0 || xx >= 5) continue;
              s += w.at({o, c, ky, kx}) * x.at({0, c, yy, xx});
            }
        EXPECT_NEAR(y.at({0, o, i, j}), s, 1e-12);
      }
}

TEST(OpsForward, SoftmaxRowsSumToOne) {
  const Tensor p = ops::softmax(Var(rnd({4, 7}, 54, -30, 30))).value();
  for (std::int64_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::int64_t c = 0; c < 7; ++c) s += p.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(OpsForward, LayerNormNormalizes) {
  const Tensor y = ops::layer_norm(Var(rnd({2, 8}, 55, -5, 5)), Var(Tensor({8}, 1.0)), Var(Tensor({8}))).value();
  for (std::int64_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::int64_t c = 0; c < 8; ++c) m += y.at({r, c}) / 8;
    for (std::int64_t c = 0; c < 8; ++c) v += (y.at({r, c}) - m) * (y.at({r, c}) - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(OpsForward, BatchNormUpdatesRunningStatistics) {
  Tensor rm({1}), rv({1}, 1.0);
  const Tensor x({2, 1, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  ops::batch_norm2d(Var(x), Var(Tensor({1}, 1.0)), Var(Tensor({1})), rm, rv, true);
  EXPECT_NEAR(rm[0], 0.1 * 2.5, 1e-12);
  // unbiased batch variance 5/3
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(OpsForward, CrossEntropyValue) {
  const Tensor z({1, 2}, {2.0, 0.0});
  const double l = ops::cross_entropy(Var(z), {1}).value()[0];
  EXPECT_NEAR(l, std::log(1.0 + std::exp(2.0)), 1e-12);
  EXPECT_THROW(ops::cross_entropy(Var(z), {2}), std::out_of_range);
  EXPECT_THROW(ops::cross_entropy(Var(z), {0, 1}), ShapeError);
}

TEST(OpsForward, SimamMatchesScalarOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = rnd({2, 3, 4, 5}, 100 + s, -3, 3);
    EXPECT_LT(max_abs_diff(ops::simam(Var(x), 1e-4).value(), oracle::simam(x, 1e-4)), 1e-12);
  }
}

TEST(OpsForward, SimamRejectsSingleElementSlices) {
  EXPECT_THROW(ops::simam(Var(Tensor({1, 2, 1, 1})), 1e-4), ShapeError);
}

TEST(OpsForward, SimamOfConstantMapIsHalfSigmoidScale) {
  // Zero deviation everywhere: E_inv = 0.5, so y = x * sigmoid(0.5).
  const Tensor x({1, 1, 2, 2}, 3.0);
  const Tensor y = ops::simam(Var(x), 1e-4).value();
  for (auto v : y.values()) EXPECT_NEAR(v, 3.0 / (1.0 + std::exp(-0.5)), 1e-12);
}

TEST(OpsForward, MaxPoolPicksWindowMaximum) {
  const Tensor x({1, 1, 2, 2}, {1.0, 5.0, -2.0, 3.0});
  EXPECT_DOUBLE_EQ(ops::max_pool2d(Var(x), 2, 2).value()[0], 5.0);
  EXPECT_DOUBLE_EQ(ops::avg_pool2d(Var(x), 2, 2).value()[0], 1.75);
}

TEST(OpsForward, DropoutIsIdentityOutsideTraining) {
  std::mt19937_64 rng(1);
  const Tensor x = rnd({3, 3}, 56);
  EXPECT_EQ(max_abs_diff(ops::dropout(Var(x), 0.5, rng, false).value(), x), 0.0);
  EXPECT_THROW(ops::dropout(Var(x), 1.0, rng, true), std::invalid_argument);
}

TEST(OpsErrors, ShapeMismatchesNameTheOperation) {
  try {
    ops::add(Var(Tensor({2})), Var(Tensor({3})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(Var(Tensor({2, 3})), Var(Tensor({4, 2}))), ShapeError);
  EXPECT_THROW(ops::split_heads(Var(Tensor({1, 2, 6})), 4), ShapeError);
  EXPECT_THROW(ops::conv2d(Var(Tensor({1, 2, 2, 2})), Var(Tensor({1, 2, 3, 3})), Var()), ShapeError);
}
