#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "msht/autograd.hpp"

/// Differentiable operations on Var. Layouts are NCHW for images and
/// batch x tokens x dim for sequences.
namespace msht::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var reshape(const Var& x, Shape shape);

Var relu(const Var& x);
Var gelu(const Var& x);  // erf form
Var sigmoid(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

/// op(a) @ op(b) over matching leading batch dims; b may also be rank 2 and
/// shared across the batch.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
/// x[..., in] @ weight[out, in]^T + bias[out]; bias may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};
/// weight[out, in, kh, kw]; bias[out] may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt = {});

/// Batch statistics when training (running estimates updated in place),
/// running estimates otherwise.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var softmax(const Var& x);  // last axis

Var max_pool2d(const Var& x, int kernel, int stride, int padding = 0);
Var avg_pool2d(const Var& x, int kernel, int stride);
Var global_avg_pool(const Var& x);  // [B,C,H,W] -> [B,C]
Var global_max_pool(const Var& x);  // [B,C,H,W] -> [B,C]
Var channel_mean(const Var& x);     // [B,C,H,W] -> [B,1,H,W]
Var channel_max(const Var& x);      // [B,C,H,W] -> [B,1,H,W]
Var concat_channels(const Var& a, const Var& b);
Var scale_channels(const Var& x, const Var& s);  // s [B,C]
Var scale_spatial(const Var& x, const Var& s);   // s [B,1,H,W]

/// [B,D,H,W] -> [B,H*W,D] (flatten then transpose).
Var map_to_tokens(const Var& x);
/// [B,N,D] with token [1,D] -> [B,N+1,D], token first.
Var prepend_token(const Var& tokens, const Var& token);
/// [B,T,D] + pos[T,D]
Var add_positional(const Var& tokens, const Var& pos);
Var select_token(const Var& x, std::int64_t index);  // [B,T,D] -> [B,D]
Var mean_tokens(const Var& x);                        // [B,T,D] -> [B,D]
Var split_heads(const Var& x, int heads);             // [B,T,D] -> [B,h,T,D/h]
Var merge_heads(const Var& x);                        // [B,h,T,d] -> [B,T,h*d]

/// Parameter-free energy attention, applied independently to every HxW slice.
Var simam(const Var& x, double lambda);

/// Mean cross-entropy of softmax(logits) against integer labels. Optional
/// per-class weights (empty = unweighted).
Var cross_entropy(const Var& logits, const std::vector<int>& labels,
                  const std::vector<double>& class_weights = {});

Var dropout(const Var& x, double p, std::mt19937_64& rng, bool training);

}  // namespace msht::ops
