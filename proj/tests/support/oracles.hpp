#pragma once

// Independent reference implementations used by the tests. They use plain
// loops over the defining formulas and share no code with the library ops.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msht/fgd.hpp"
#include "msht/tensor.hpp"

namespace msht::oracle {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);

/// Energy attention on every H x W slice, straight from the formula.
Tensor simam(const Tensor& x, double lambda);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // W [out, in], b [out]
  int heads = 1;
  bool literal_scaling = false;
};

AttentionWeights weights_of(const MultiHeadAttention& attn);

/// Multi-head attention over [B, T, D] inputs with per-element loops.
/// weights, when given, receives [B, h, Tq, Tk].
Tensor attention(const AttentionWeights& w, const Tensor& query_src, const Tensor& key_src,
                 const Tensor& value_src, Tensor* weights = nullptr);

double relative_error(double analytic, double numeric, double floor = 1e-8);

struct GradCheck {
  double max_relative_error = 0.0;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  int checked = 0;
  double max_abs_analytic = 0.0, max_abs_numeric = 0.0;
};

/// Central-difference check of d loss / d param at the given flat indices.
/// loss() rebuilds the graph from the current parameter values.
GradCheck finite_difference(Var param, const std::function<Var()>& loss,
                            const std::vector<std::int64_t>& indices, double step = 1e-5);

/// `count` distinct flat indices drawn from [0, numel).
std::vector<std::int64_t> sample_indices(std::int64_t numel, int count, std::mt19937_64& rng);

struct Metrics {
  std::optional<double> acc, spe, sen, ppv, npv, f1;
};

/// Definitional metrics from confusion counts with long-double arithmetic.
Metrics metrics(std::int64_t tp, std::int64_t tn, std::int64_t fp, std::int64_t fn);

}  // namespace msht::oracle
