#include "msht/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "blas.hpp"

namespace msht::ops {

using detail::gemm;

namespace {

Tensor* grad_of(Node& n, std::size_t i) {
  if (i >= n.inputs.size() || !n.inputs[i] || !n.inputs[i]->requires_grad) return nullptr;
  return &n.inputs[i]->grad_buffer();
}

const Tensor& value_of(Node& n, std::size_t i) { return n.inputs[i]->value; }

void require_rank(const Var& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(x.shape()));
  }
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <class F>
Var unary(const Var& x, F&& f, std::function<void(Node&)> back) {
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  return Var::make(std::move(out), {x}, std::move(back));
}

int as_int(std::int64_t v) { return static_cast<int>(v); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = grad_of(n, k)) {
        for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
    if (Tensor* g = grad_of(n, 1)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      const Tensor& o = value_of(n, 1);
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * o[i];
    }
    if (Tensor* g = grad_of(n, 1)) {
      const Tensor& o = value_of(n, 0);
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * o[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * s;
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return Var::make(std::move(out), {x}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
  });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      const Tensor& in = value_of(n, 0);
      for (std::int64_t i = 0; i < g->numel(); ++i) {
        if (in[i] > 0.0) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var gelu(const Var& x) {
  return unary(x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
               [](Node& n) {
                 if (Tensor* g = grad_of(n, 0)) {
                   const Tensor& in = value_of(n, 0);
                   const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                   for (std::int64_t i = 0; i < g->numel(); ++i) {
                     const double v = in[i];
                     const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                     const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                     (*g)[i] += n.grad[i] * (cdf + v * pdf);
                   }
                 }
               });
}

Var sigmoid(const Var& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) {
        const double s = n.value[i];
        (*g)[i] += n.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return Var::make(Tensor({1}, s), {x}, [](Node& n) {
    if (Tensor* g = grad_of(n, 0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[0];
    }
  });
}

Var mean(const Var& x) {
  const auto count = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / count);
}

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const bool shared_b = bv.rank() == 2 && av.rank() > 2;
  if (!shared_b && av.rank() != bv.rank()) throw ShapeError("matmul: rank mismatch");
  Shape batch_shape(av.shape().begin(), av.shape().end() - 2);
  if (!shared_b && !std::equal(batch_shape.begin(), batch_shape.end(), bv.shape().begin())) {
    throw ShapeError("matmul: batch dims differ " + shape_to_string(av.shape()) + " vs " +
                     shape_to_string(bv.shape()));
  }
  const int m = as_int(transpose_a ? av.dim(-1) : av.dim(-2));
  const int k = as_int(transpose_a ? av.dim(-2) : av.dim(-1));
  const int kb = as_int(transpose_b ? bv.dim(-1) : bv.dim(-2));
  const int nn = as_int(transpose_b ? bv.dim(-2) : bv.dim(-1));
  if (k != kb) {
    throw ShapeError("matmul: inner dims differ " + shape_to_string(av.shape()) + " vs " +
                     shape_to_string(bv.shape()));
  }
  const std::int64_t batch = shape_numel(batch_shape);
  Shape out_shape = batch_shape;
  out_shape.push_back(m);
  out_shape.push_back(nn);
  Tensor out(out_shape);
  const std::int64_t a_step = static_cast<std::int64_t>(m) * k;
  const std::int64_t b_step = shared_b ? 0 : static_cast<std::int64_t>(k) * nn;
  const std::int64_t c_step = static_cast<std::int64_t>(m) * nn;
  for (std::int64_t i = 0; i < batch; ++i) {
    gemm(transpose_a, transpose_b, m, nn, k, 1.0, av.data() + i * a_step, bv.data() + i * b_step,
         0.0, out.data() + i * c_step);
  }
  return Var::make(std::move(out), {a, b},
                   [=](Node& node) {
                     const Tensor& A = value_of(node, 0);
                     const Tensor& B = value_of(node, 1);
                     Tensor* ga = grad_of(node, 0);
                     Tensor* gb = grad_of(node, 1);
                     for (std::int64_t i = 0; i < batch; ++i) {
                       const double* dc = node.grad.data() + i * c_step;
                       const double* ap = A.data() + i * a_step;
                       const double* bp = B.data() + i * b_step;
                       if (ga) {
                         double* da = ga->data() + i * a_step;
                         if (!transpose_a) {
                           gemm(false, !transpose_b, m, k, nn, 1.0, dc, bp, 1.0, da);
                         } else {
                           gemm(transpose_b, true, k, m, nn, 1.0, bp, dc, 1.0, da);
                         }
                       }
                       if (gb) {
                         double* db = gb->data() + i * b_step;
                         if (!transpose_b) {
                           gemm(!transpose_a, false, k, nn, m, 1.0, ap, dc, 1.0, db);
                         } else {
                           gemm(true, transpose_a, nn, k, m, 1.0, dc, ap, 1.0, db);
                         }
                       }
                     }
                   });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (wv.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const int in = as_int(wv.dim(1));
  const int out_features = as_int(wv.dim(0));
  if (xv.dim(-1) != in) {
    throw ShapeError("linear: input " + shape_to_string(xv.shape()) + " vs weight " +
                     shape_to_string(wv.shape()));
  }
  if (bias.defined() && (bias.value().rank() != 1 || bias.dim(0) != out_features)) {
    throw ShapeError("linear: bias shape " + shape_to_string(bias.shape()));
  }
  const int rows = as_int(xv.numel() / in);
  Shape out_shape = xv.shape();
  out_shape.back() = out_features;
  Tensor out(out_shape);
  gemm(false, true, rows, out_features, in, 1.0, xv.data(), wv.data(), 0.0, out.data());
  if (bias.defined()) {
    const Tensor& bv = bias.value();
    for (int r = 0; r < rows; ++r) {
      double* row = out.data() + static_cast<std::int64_t>(r) * out_features;
      for (int j = 0; j < out_features; ++j) row[j] += bv[j];
    }
  }
  return Var::make(std::move(out), {x, weight, bias}, [=](Node& n) {
    const Tensor& X = value_of(n, 0);
    const Tensor& W = value_of(n, 1);
    if (Tensor* gx = grad_of(n, 0)) {
      gemm(false, false, rows, in, out_features, 1.0, n.grad.data(), W.data(), 1.0, gx->data());
    }
    if (Tensor* gw = grad_of(n, 1)) {
      gemm(true, false, out_features, in, rows, 1.0, n.grad.data(), X.data(), 1.0, gw->data());
    }
    if (Tensor* gb = grad_of(n, 2)) {
      for (int r = 0; r < rows; ++r) {
        const double* row = n.grad.data() + static_cast<std::int64_t>(r) * out_features;
        for (int j = 0; j < out_features; ++j) (*gb)[j] += row[j];
      }
    }
  });
}

namespace {

struct ConvGeometry {
  int channels, height, width, kh, kw, stride, padding, out_h, out_w;
  int col_rows() const { return channels * kh * kw; }
  int col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const int ncols = g.col_cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        double* row = cols + static_cast<std::int64_t>((c * g.kh + ki) * g.kw + kj) * ncols;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          double* dst = row + static_cast<std::int64_t>(oh) * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::int64_t>(c) * g.height + ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + kj;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const int ncols = g.col_cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + static_cast<std::int64_t>((c * g.kh + ki) * g.kw + kj) * ncols;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          const double* src = row + static_cast<std::int64_t>(oh) * g.out_w;
          double* dst = x + (static_cast<std::int64_t>(c) * g.height + ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (wv.dim(1) != xv.dim(1)) {
    throw ShapeError("conv2d: input " + shape_to_string(xv.shape()) + " vs weight " +
                     shape_to_string(wv.shape()));
  }
  const int batch = as_int(xv.dim(0));
  const int out_channels = as_int(wv.dim(0));
  ConvGeometry g{as_int(xv.dim(1)), as_int(xv.dim(2)), as_int(xv.dim(3)), as_int(wv.dim(2)),
                 as_int(wv.dim(3)), opt.stride, opt.padding, 0, 0};
  g.out_h = (g.height + 2 * g.padding - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kw) / g.stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias.defined() && bias.value().numel() != out_channels) {
    throw ShapeError("conv2d: bias size mismatch");
  }

  Tensor out({batch, out_channels, g.out_h, g.out_w});
  const std::int64_t in_step = static_cast<std::int64_t>(g.channels) * g.height * g.width;
  const std::int64_t out_step = static_cast<std::int64_t>(out_channels) * g.col_cols();
  std::vector<double> cols;
  if (!g.pointwise()) cols.resize(static_cast<std::size_t>(g.col_rows()) * g.col_cols());
  for (int b = 0; b < batch; ++b) {
    const double* src = xv.data() + b * in_step;
    if (!g.pointwise()) {
      im2col(src, g, cols.data());
      src = cols.data();
    }
    gemm(false, false, out_channels, g.col_cols(), g.col_rows(), 1.0, wv.data(), src, 0.0,
         out.data() + b * out_step);
  }
  if (bias.defined()) {
    const Tensor& bv = bias.value();
    for (int b = 0; b < batch; ++b) {
      for (int o = 0; o < out_channels; ++o) {
        double* p = out.data() + b * out_step + static_cast<std::int64_t>(o) * g.col_cols();
        for (int i = 0; i < g.col_cols(); ++i) p[i] += bv[o];
      }
    }
  }

  return Var::make(std::move(out), {x, weight, bias}, [=](Node& n) {
    const Tensor& X = value_of(n, 0);
    const Tensor& W = value_of(n, 1);
    Tensor* gx = grad_of(n, 0);
    Tensor* gw = grad_of(n, 1);
    Tensor* gb = grad_of(n, 2);
    std::vector<double> col_buf;
    std::vector<double> dcol_buf;
    if (!g.pointwise()) {
      if (gw) col_buf.resize(static_cast<std::size_t>(g.col_rows()) * g.col_cols());
      if (gx) dcol_buf.resize(static_cast<std::size_t>(g.col_rows()) * g.col_cols());
    }
    for (int b = 0; b < batch; ++b) {
      const double* dy = n.grad.data() + b * out_step;
      if (gw) {
        const double* src = X.data() + b * in_step;
        if (!g.pointwise()) {
          im2col(src, g, col_buf.data());
          src = col_buf.data();
        }
        gemm(false, true, out_channels, g.col_rows(), g.col_cols(), 1.0, dy, src, 1.0, gw->data());
      }
      if (gx) {
        double* dx = gx->data() + b * in_step;
        if (g.pointwise()) {
          gemm(true, false, g.col_rows(), g.col_cols(), out_channels, 1.0, W.data(), dy, 1.0, dx);
        } else {
          gemm(true, false, g.col_rows(), g.col_cols(), out_channels, 1.0, W.data(), dy, 0.0,
               dcol_buf.data());
          col2im_add(dcol_buf.data(), g, dx);
        }
      }
      if (gb) {
        for (int o = 0; o < out_channels; ++o) {
          const double* p = dy + static_cast<std::int64_t>(o) * g.col_cols();
          double s = 0.0;
          for (int i = 0; i < g.col_cols(); ++i) s += p[i];
          (*gb)[o] += s;
        }
      }
    }
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps) {
  require_rank(x, 4, "batch_norm2d");
  const Tensor& xv = x.value();
  const int batch = as_int(xv.dim(0));
  const int channels = as_int(xv.dim(1));
  const std::int64_t plane = xv.dim(2) * xv.dim(3);
  if (gamma.value().numel() != channels || beta.value().numel() != channels ||
      running_mean.numel() != channels || running_var.numel() != channels) {
    throw ShapeError("batch_norm2d: parameter size does not match " + std::to_string(channels) +
                     " channels");
  }
  const double count = static_cast<double>(batch) * static_cast<double>(plane);
  std::vector<double> mean(channels), inv_std(channels);
  for (int c = 0; c < channels; ++c) {
    if (training) {
      double s = 0.0;
      for (int b = 0; b < batch; ++b) {
        const double* p = xv.data() + (static_cast<std::int64_t>(b) * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (int b = 0; b < batch; ++b) {
        const double* p = xv.data() + (static_cast<std::int64_t>(b) * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      running_mean[c] = (1 - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (1 - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(b) * channels + c) * plane;
      const double a = gv[c] * inv_std[c];
      const double shift = bv[c] - mean[c] * a;
      for (std::int64_t i = 0; i < plane; ++i) out[off + i] = xv[off + i] * a + shift;
    }
  }
  return Var::make(std::move(out), {x, gamma, beta}, [=](Node& n) {
    const Tensor& X = value_of(n, 0);
    const Tensor& G = value_of(n, 1);
    Tensor* gx = grad_of(n, 0);
    Tensor* gg = grad_of(n, 1);
    Tensor* gbeta = grad_of(n, 2);
    for (int c = 0; c < channels; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < batch; ++b) {
        const std::int64_t off = (static_cast<std::int64_t>(b) * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double xhat = (X[off + i] - mean[c]) * inv_std[c];
          sum_dy += n.grad[off + i];
          sum_dy_xhat += n.grad[off + i] * xhat;
        }
      }
      if (gg) (*gg)[c] += sum_dy_xhat;
      if (gbeta) (*gbeta)[c] += sum_dy;
      if (!gx) continue;
      const double a = G[c] * inv_std[c];
      for (int b = 0; b < batch; ++b) {
        const std::int64_t off = (static_cast<std::int64_t>(b) * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          if (training) {
            const double xhat = (X[off + i] - mean[c]) * inv_std[c];
            (*gx)[off + i] += a * (n.grad[off + i] - sum_dy / count - xhat * sum_dy_xhat / count);
          } else {
            (*gx)[off + i] += a * n.grad[off + i];
          }
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  const int d = as_int(xv.dim(-1));
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw ShapeError("layer_norm: parameter size mismatch");
  }
  const std::int64_t rows = xv.numel() / d;
  std::vector<double> mean(rows), inv_std(rows);
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* p = xv.data() + r * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += p[j];
    const double mu = s / d;
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += (p[j] - mu) * (p[j] - mu);
    const double is = 1.0 / std::sqrt(ss / d + eps);
    mean[r] = mu;
    inv_std[r] = is;
    double* o = out.data() + r * d;
    for (int j = 0; j < d; ++j) o[j] = (p[j] - mu) * is * gv[j] + bv[j];
  }
  return Var::make(std::move(out), {x, gamma, beta}, [=](Node& n) {
    const Tensor& X = value_of(n, 0);
    const Tensor& G = value_of(n, 1);
    Tensor* gx = grad_of(n, 0);
    Tensor* gg = grad_of(n, 1);
    Tensor* gb = grad_of(n, 2);
    std::vector<double> dxhat(d);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* p = X.data() + r * d;
      const double* dy = n.grad.data() + r * d;
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (int j = 0; j < d; ++j) {
        const double xhat = (p[j] - mean[r]) * inv_std[r];
        if (gg) (*gg)[j] += dy[j] * xhat;
        if (gb) (*gb)[j] += dy[j];
        dxhat[j] = dy[j] * G[j];
        mean_dxhat += dxhat[j];
        mean_dxhat_xhat += dxhat[j] * xhat;
      }
      if (!gx) continue;
      mean_dxhat /= d;
      mean_dxhat_xhat /= d;
      double* dx = gx->data() + r * d;
      for (int j = 0; j < d; ++j) {
        const double xhat = (p[j] - mean[r]) * inv_std[r];
        dx[j] += inv_std[r] * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
      }
    }
  });
}

Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  const int d = as_int(xv.dim(-1));
  const std::int64_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* p = xv.data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(p, p + d);
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = std::exp(p[j] - mx);
      s += o[j];
    }
    for (int j = 0; j < d; ++j) o[j] /= s;
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    Tensor* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * d;
      const double* dy = n.grad.data() + r * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += dy[j] * y[j];
      double* dx = gx->data() + r * d;
      for (int j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

Var max_pool2d(const Var& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "max_pool2d");
  const Tensor& xv = x.value();
  const int h = as_int(xv.dim(2)), w = as_int(xv.dim(3));
  const int oh = (h + 2 * padding - kernel) / stride + 1;
  const int ow = (w + 2 * padding - kernel) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("max_pool2d: window larger than input");
  const std::int64_t planes = xv.dim(0) * xv.dim(1);
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_idx = -1;
        for (int ki = 0; ki < kernel; ++ki) {
          const int ih = i * stride - padding + ki;
          if (ih < 0 || ih >= h) continue;
          for (int kj = 0; kj < kernel; ++kj) {
            const int iw = j * stride - padding + kj;
            if (iw < 0 || iw >= w) continue;
            const double v = src[ih * w + iw];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = p * h * w + ih * w + iw;
            }
          }
        }
        const std::int64_t o = (p * oh + i) * ow + j;
        out[o] = best;
        (*argmax)[static_cast<std::size_t>(o)] = best_idx;
      }
    }
  }
  return Var::make(std::move(out), {x}, [argmax](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t o = 0; o < n.grad.numel(); ++o) {
        (*gx)[(*argmax)[static_cast<std::size_t>(o)]] += n.grad[o];
      }
    }
  });
}

Var avg_pool2d(const Var& x, int kernel, int stride) {
  require_rank(x, 4, "avg_pool2d");
  const Tensor& xv = x.value();
  const int h = as_int(xv.dim(2)), w = as_int(xv.dim(3));
  const int oh = (h - kernel) / stride + 1;
  const int ow = (w - kernel) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("avg_pool2d: window larger than input");
  const std::int64_t planes = xv.dim(0) * xv.dim(1);
  const double inv = 1.0 / (static_cast<double>(kernel) * kernel);
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double s = 0.0;
        for (int ki = 0; ki < kernel; ++ki) {
          for (int kj = 0; kj < kernel; ++kj) s += src[(i * stride + ki) * w + j * stride + kj];
        }
        out[(p * oh + i) * ow + j] = s * inv;
      }
    }
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    Tensor* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::int64_t p = 0; p < planes; ++p) {
      double* dst = gx->data() + p * h * w;
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          const double gval = n.grad[(p * oh + i) * ow + j] * inv;
          for (int ki = 0; ki < kernel; ++ki) {
            for (int kj = 0; kj < kernel; ++kj) dst[(i * stride + ki) * w + j * stride + kj] += gval;
          }
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const Tensor& xv = x.value();
  const std::int64_t planes = xv.dim(0) * xv.dim(1);
  const std::int64_t plane = xv.dim(2) * xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1)});
  for (std::int64_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) s += xv[p * plane + i];
    out[p] = s / static_cast<double>(plane);
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t p = 0; p < planes; ++p) {
        const double gval = n.grad[p] / static_cast<double>(plane);
        for (std::int64_t i = 0; i < plane; ++i) (*gx)[p * plane + i] += gval;
      }
    }
  });
}

Var global_max_pool(const Var& x) {
  require_rank(x, 4, "global_max_pool");
  const Tensor& xv = x.value();
  const std::int64_t planes = xv.dim(0) * xv.dim(1);
  const std::int64_t plane = xv.dim(2) * xv.dim(3);
  Tensor out({xv.dim(0), xv.dim(1)});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(planes));
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * plane;
    const auto it = std::max_element(src, src + plane);
    out[p] = *it;
    (*argmax)[static_cast<std::size_t>(p)] = p * plane + (it - src);
  }
  return Var::make(std::move(out), {x}, [argmax](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t p = 0; p < n.grad.numel(); ++p) {
        (*gx)[(*argmax)[static_cast<std::size_t>(p)]] += n.grad[p];
      }
    }
  });
}

Var channel_mean(const Var& x) {
  require_rank(x, 4, "channel_mean");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), channels = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out({batch, 1, xv.dim(2), xv.dim(3)});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const double* src = xv.data() + (b * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) out[b * plane + i] += src[i];
    }
    for (std::int64_t i = 0; i < plane; ++i) out[b * plane + i] /= static_cast<double>(channels);
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t c = 0; c < channels; ++c) {
          double* dst = gx->data() + (b * channels + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            dst[i] += n.grad[b * plane + i] / static_cast<double>(channels);
          }
        }
      }
    }
  });
}

Var channel_max(const Var& x) {
  require_rank(x, 4, "channel_max");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), channels = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out({batch, 1, xv.dim(2), xv.dim(3)});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < plane; ++i) {
      std::int64_t best = b * channels * plane + i;
      for (std::int64_t c = 1; c < channels; ++c) {
        const std::int64_t idx = (b * channels + c) * plane + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      out[b * plane + i] = xv[best];
      (*argmax)[static_cast<std::size_t>(b * plane + i)] = best;
    }
  }
  return Var::make(std::move(out), {x}, [argmax](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t o = 0; o < n.grad.numel(); ++o) {
        (*gx)[(*argmax)[static_cast<std::size_t>(o)]] += n.grad[o];
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
    throw ShapeError("concat_channels: " + shape_to_string(av.shape()) + " vs " +
                     shape_to_string(bv.shape()));
  }
  const std::int64_t batch = av.dim(0);
  const std::int64_t a_step = av.numel() / batch, b_step = bv.numel() / batch;
  Tensor out({batch, av.dim(1) + bv.dim(1), av.dim(2), av.dim(3)});
  for (std::int64_t i = 0; i < batch; ++i) {
    std::copy_n(av.data() + i * a_step, a_step, out.data() + i * (a_step + b_step));
    std::copy_n(bv.data() + i * b_step, b_step, out.data() + i * (a_step + b_step) + a_step);
  }
  return Var::make(std::move(out), {a, b}, [=](Node& n) {
    Tensor* ga = grad_of(n, 0);
    Tensor* gb = grad_of(n, 1);
    for (std::int64_t i = 0; i < batch; ++i) {
      const double* src = n.grad.data() + i * (a_step + b_step);
      if (ga) {
        for (std::int64_t j = 0; j < a_step; ++j) (*ga)[i * a_step + j] += src[j];
      }
      if (gb) {
        for (std::int64_t j = 0; j < b_step; ++j) (*gb)[i * b_step + j] += src[a_step + j];
      }
    }
  });
}

Var scale_channels(const Var& x, const Var& s) {
  require_rank(x, 4, "scale_channels");
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (sv.rank() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1)) {
    throw ShapeError("scale_channels: gate " + shape_to_string(sv.shape()) + " for input " +
                     shape_to_string(xv.shape()));
  }
  const std::int64_t planes = xv.dim(0) * xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t i = 0; i < plane; ++i) out[p * plane + i] = xv[p * plane + i] * sv[p];
  }
  return Var::make(std::move(out), {x, s}, [=](Node& n) {
    const Tensor& X = value_of(n, 0);
    const Tensor& S = value_of(n, 1);
    Tensor* gx = grad_of(n, 0);
    Tensor* gs = grad_of(n, 1);
    for (std::int64_t p = 0; p < planes; ++p) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) {
        const std::int64_t idx = p * plane + i;
        if (gx) (*gx)[idx] += n.grad[idx] * S[p];
        acc += n.grad[idx] * X[idx];
      }
      if (gs) (*gs)[p] += acc;
    }
  });
}

Var scale_spatial(const Var& x, const Var& s) {
  require_rank(x, 4, "scale_spatial");
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (sv.rank() != 4 || sv.dim(0) != xv.dim(0) || sv.dim(1) != 1 || sv.dim(2) != xv.dim(2) ||
      sv.dim(3) != xv.dim(3)) {
    throw ShapeError("scale_spatial: gate " + shape_to_string(sv.shape()) + " for input " +
                     shape_to_string(xv.shape()));
  }
  const std::int64_t batch = xv.dim(0), channels = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t i = 0; i < plane; ++i) {
        out[(b * channels + c) * plane + i] = xv[(b * channels + c) * plane + i] * sv[b * plane + i];
      }
    }
  }
  return Var::make(std::move(out), {x, s}, [=](Node& n) {
    const Tensor& X = value_of(n, 0);
    const Tensor& S = value_of(n, 1);
    Tensor* gx = grad_of(n, 0);
    Tensor* gs = grad_of(n, 1);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t c = 0; c < channels; ++c) {
        for (std::int64_t i = 0; i < plane; ++i) {
          const std::int64_t idx = (b * channels + c) * plane + i;
          if (gx) (*gx)[idx] += n.grad[idx] * S[b * plane + i];
          if (gs) (*gs)[b * plane + i] += n.grad[idx] * X[idx];
        }
      }
    }
  });
}

Var map_to_tokens(const Var& x) {
  require_rank(x, 4, "map_to_tokens");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), d = xv.dim(1), tokens = xv.dim(2) * xv.dim(3);
  Tensor out({batch, tokens, d});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < d; ++c) {
      for (std::int64_t t = 0; t < tokens; ++t) {
        out[(b * tokens + t) * d + c] = xv[(b * d + c) * tokens + t];
      }
    }
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t c = 0; c < d; ++c) {
          for (std::int64_t t = 0; t < tokens; ++t) {
            (*gx)[(b * d + c) * tokens + t] += n.grad[(b * tokens + t) * d + c];
          }
        }
      }
    }
  });
}

Var prepend_token(const Var& tokens, const Var& token) {
  require_rank(tokens, 3, "prepend_token");
  const Tensor& tv = tokens.value();
  const Tensor& kv = token.value();
  const std::int64_t batch = tv.dim(0), count = tv.dim(1), d = tv.dim(2);
  if (kv.numel() != d) {
    throw ShapeError("prepend_token: token " + shape_to_string(kv.shape()) + " vs dim " +
                     std::to_string(d));
  }
  Tensor out({batch, count + 1, d});
  for (std::int64_t b = 0; b < batch; ++b) {
    double* dst = out.data() + b * (count + 1) * d;
    std::copy_n(kv.data(), d, dst);
    std::copy_n(tv.data() + b * count * d, count * d, dst + d);
  }
  return Var::make(std::move(out), {tokens, token}, [=](Node& n) {
    Tensor* gt = grad_of(n, 0);
    Tensor* gk = grad_of(n, 1);
    for (std::int64_t b = 0; b < batch; ++b) {
      const double* src = n.grad.data() + b * (count + 1) * d;
      if (gk) {
        for (std::int64_t j = 0; j < d; ++j) (*gk)[j] += src[j];
      }
      if (gt) {
        for (std::int64_t j = 0; j < count * d; ++j) (*gt)[b * count * d + j] += src[d + j];
      }
    }
  });
}

Var add_positional(const Var& tokens, const Var& pos) {
  require_rank(tokens, 3, "add_positional");
  const Tensor& tv = tokens.value();
  const Tensor& pv = pos.value();
  const std::int64_t batch = tv.dim(0), step = tv.dim(1) * tv.dim(2);
  if (pv.numel() != step) {
    throw ShapeError("add_positional: encoding " + shape_to_string(pv.shape()) +
                     " does not cover tokens " + shape_to_string(tv.shape()));
  }
  Tensor out = tv;
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t j = 0; j < step; ++j) out[b * step + j] += pv[j];
  }
  return Var::make(std::move(out), {tokens, pos}, [=](Node& n) {
    Tensor* gt = grad_of(n, 0);
    Tensor* gp = grad_of(n, 1);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t j = 0; j < step; ++j) {
        if (gt) (*gt)[b * step + j] += n.grad[b * step + j];
        if (gp) (*gp)[j] += n.grad[b * step + j];
      }
    }
  });
}

Var select_token(const Var& x, std::int64_t index) {
  require_rank(x, 3, "select_token");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), count = xv.dim(1), d = xv.dim(2);
  if (index < 0 || index >= count) throw ShapeError("select_token: index out of range");
  Tensor out({batch, d});
  for (std::int64_t b = 0; b < batch; ++b) {
    std::copy_n(xv.data() + (b * count + index) * d, d, out.data() + b * d);
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t j = 0; j < d; ++j) (*gx)[(b * count + index) * d + j] += n.grad[b * d + j];
      }
    }
  });
}

Var mean_tokens(const Var& x) {
  require_rank(x, 3, "mean_tokens");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), count = xv.dim(1), d = xv.dim(2);
  Tensor out({batch, d});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t t = 0; t < count; ++t) {
      for (std::int64_t j = 0; j < d; ++j) out[b * d + j] += xv[(b * count + t) * d + j];
    }
    for (std::int64_t j = 0; j < d; ++j) out[b * d + j] /= static_cast<double>(count);
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t t = 0; t < count; ++t) {
          for (std::int64_t j = 0; j < d; ++j) {
            (*gx)[(b * count + t) * d + j] += n.grad[b * d + j] / static_cast<double>(count);
          }
        }
      }
    }
  });
}

Var split_heads(const Var& x, int heads) {
  require_rank(x, 3, "split_heads");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), count = xv.dim(1), d = xv.dim(2);
  if (heads <= 0 || d % heads != 0) {
    throw ShapeError("split_heads: dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::int64_t hd = d / heads;
  Tensor out({batch, heads, count, hd});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      for (std::int64_t t = 0; t < count; ++t) {
        std::copy_n(xv.data() + (b * count + t) * d + h * hd, hd,
                    out.data() + ((b * heads + h) * count + t) * hd);
      }
    }
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
          for (std::int64_t t = 0; t < count; ++t) {
            const double* src = n.grad.data() + ((b * heads + h) * count + t) * hd;
            double* dst = gx->data() + (b * count + t) * d + h * hd;
            for (std::int64_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
        }
      }
    }
  });
}

Var merge_heads(const Var& x) {
  require_rank(x, 4, "merge_heads");
  const Tensor& xv = x.value();
  const std::int64_t batch = xv.dim(0), heads = xv.dim(1), count = xv.dim(2), hd = xv.dim(3);
  const std::int64_t d = heads * hd;
  Tensor out({batch, count, d});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      for (std::int64_t t = 0; t < count; ++t) {
        std::copy_n(xv.data() + ((b * heads + h) * count + t) * hd, hd,
                    out.data() + (b * count + t) * d + h * hd);
      }
    }
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
          for (std::int64_t t = 0; t < count; ++t) {
            const double* src = n.grad.data() + (b * count + t) * d + h * hd;
            double* dst = gx->data() + ((b * heads + h) * count + t) * hd;
            for (std::int64_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
        }
      }
    }
  });
}

Var simam(const Var& x, double lambda) {
  require_rank(x, 4, "simam");
  const Tensor& xv = x.value();
  const std::int64_t planes = xv.dim(0) * xv.dim(1);
  const std::int64_t m = xv.dim(2) * xv.dim(3);
  if (m < 2) {
    throw ShapeError("simam: spatial size must be at least 2 elements, got " +
                     shape_to_string(xv.shape()));
  }
  const double n_div = static_cast<double>(m - 1);
  // Per-plane mean and energy denominator 4 * (v + lambda).
  std::vector<double> mu(static_cast<std::size_t>(planes)), denom(static_cast<std::size_t>(planes));
  Tensor out(xv.shape());
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * m;
    double s = 0.0;
    for (std::int64_t i = 0; i < m; ++i) s += src[i];
    const double mean_v = s / static_cast<double>(m);
    double dsum = 0.0;
    for (std::int64_t i = 0; i < m; ++i) dsum += (src[i] - mean_v) * (src[i] - mean_v);
    const double den = 4.0 * (dsum / n_div + lambda);
    mu[p] = mean_v;
    denom[p] = den;
    for (std::int64_t i = 0; i < m; ++i) {
      const double d = (src[i] - mean_v) * (src[i] - mean_v);
      const double e_inv = d / den + 0.5;
      out[p * m + i] = src[i] / (1.0 + std::exp(-e_inv));
    }
  }
  return Var::make(std::move(out), {x}, [=](Node& n) {
    Tensor* gx = grad_of(n, 0);
    if (!gx) return;
    const Tensor& X = value_of(n, 0);
    std::vector<double> gd(static_cast<std::size_t>(m));
    for (std::int64_t p = 0; p < planes; ++p) {
      const double* src = X.data() + p * m;
      const double* dy = n.grad.data() + p * m;
      double* dx = gx->data() + p * m;
      const double den = denom[p];
      double g_den = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        const double c = src[i] - mu[p];
        const double d = c * c;
        const double sig = 1.0 / (1.0 + std::exp(-(d / den + 0.5)));
        dx[i] += dy[i] * sig;
        const double g_e = dy[i] * src[i] * sig * (1.0 - sig);
        gd[i] = g_e / den;
        g_den -= g_e * d / (den * den);
      }
      const double g_v = 4.0 * g_den;
      double g_mu = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        const double c = src[i] - mu[p];
        const double g_d = gd[i] + g_v / n_div;
        dx[i] += 2.0 * c * g_d;
        g_mu -= 2.0 * c * g_d;
      }
      for (std::int64_t i = 0; i < m; ++i) dx[i] += g_mu / static_cast<double>(m);
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels,
                  const std::vector<double>& class_weights) {
  require_rank(logits, 2, "cross_entropy");
  const Tensor& zv = logits.value();
  const std::int64_t batch = zv.dim(0), classes = zv.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  if (!class_weights.empty() && static_cast<std::int64_t>(class_weights.size()) != classes) {
    throw ShapeError("cross_entropy: class weight count mismatch");
  }
  Tensor probs(zv.shape());
  double loss = 0.0, weight_total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) throw std::out_of_range("cross_entropy: label out of range");
    const double* z = zv.data() + b * classes;
    const double mx = *std::max_element(z, z + classes);
    double s = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) s += std::exp(z[k] - mx);
    for (std::int64_t k = 0; k < classes; ++k) probs[b * classes + k] = std::exp(z[k] - mx) / s;
    const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
    loss += w * (mx + std::log(s) - z[y]);
    weight_total += w;
  }
  loss /= weight_total;
  return Var::make(Tensor({1}, loss), {logits}, [=](Node& n) {
    Tensor* gz = grad_of(n, 0);
    if (!gz) return;
    for (std::int64_t b = 0; b < batch; ++b) {
      const int y = labels[static_cast<std::size_t>(b)];
      const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
      const double f = n.grad[0] * w / weight_total;
      for (std::int64_t k = 0; k < classes; ++k) {
        (*gz)[b * classes + k] += f * (probs[b * classes + k] - (k == y ? 1.0 : 0.0));
      }
    }
  });
}

Var dropout(const Var& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: probability must be below 1");
  std::bernoulli_distribution keep(1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.value().numel()));
  for (auto& m : *mask) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= (*mask)[static_cast<std::size_t>(i)];
  return Var::make(std::move(out), {x}, [mask](Node& n) {
    if (Tensor* gx = grad_of(n, 0)) {
      for (std::int64_t i = 0; i < gx->numel(); ++i) {
        (*gx)[i] += n.grad[i] * (*mask)[static_cast<std::size_t>(i)];
      }
    }
  });
}

}  // namespace msht::ops
