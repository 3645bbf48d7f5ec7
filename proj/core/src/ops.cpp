#include "blockkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "blockkd/errors.hpp"
#include "kernels.hpp"

namespace bkd {

namespace {

using GradSpan = std::span<std::vector<double>* const>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

std::string display_name(const Tensor& x) { return x.name().empty() ? "<unnamed>" : x.name(); }

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, ho, wo;
  int stride, padding;
  std::size_t ckk() const { return c * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

// Writes sample columns into a [ckk x ld] matrix starting at column `offset`.
void im2col(const double* x, const ConvGeometry& g, double* col, std::size_t ld, std::size_t offset) {
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const double* plane = x + ch * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((ch * g.kh + i) * g.kw + j) * ld + offset;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = inside ? plane[iy * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvGeometry& g, double* dx, std::size_t ld, std::size_t offset) {
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    double* plane = dx + ch * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((ch * g.kh + i) * g.kw + j) * ld + offset;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            plane[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

void check_finite(const Tensor& x, const char* context) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(context) + ": non-finite value in tensor '" +
                         display_name(x) + "'");
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  kernels::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, p);
  return detail::make_result(
      "matmul", {m, p}, std::move(out), {a, b}, [a, b, m, k, p](auto gout, GradSpan gin) {
        if (gin[0]) {
          std::vector<double> bt(p * k);
          kernels::transpose(b.data().data(), bt.data(), k, p);
          kernels::gemm_acc(gout.data(), bt.data(), gin[0]->data(), m, p, k);
        }
        if (gin[1]) {
          std::vector<double> at(k * m);
          kernels::transpose(a.data().data(), at.data(), m, k);
          kernels::gemm_acc(at.data(), gout.data(), gin[1]->data(), k, m, p);
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.f = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (w.dim(1) != g.c) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(g.c) +
                         " channels but weight " + shape_str(w.shape()) + " expects " +
                         std::to_string(w.dim(1)));
  }
  auto kernel_ok = [](std::size_t k) { return k == 1 || k == 3; };
  if (!kernel_ok(g.kh) || !kernel_ok(g.kw)) {
    throw ConfigError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(w.shape()));
  }
  if (stride < 1 || padding < 0) {
    throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  }
  const long span_h = static_cast<long>(g.h) + 2L * padding - static_cast<long>(g.kh);
  const long span_w = static_cast<long>(g.w) + 2L * padding - static_cast<long>(g.kw);
  if (span_h < 0 || span_w < 0) {
    throw ConfigError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  g.ho = static_cast<std::size_t>(span_h / stride + 1);
  g.wo = static_cast<std::size_t>(span_w / stride + 1);

  // The whole batch is lowered to one [ckk x n*p] column matrix so every
  // GEMM runs with a long inner loop even on 2x2 feature maps.
  const std::size_t p = g.positions(), ckk = g.ckk(), np = g.n * p;
  const std::size_t in_stride = g.c * g.h * g.w;
  auto col = std::make_shared<std::vector<double>>(ckk * np);
  for (std::size_t s = 0; s < g.n; ++s) im2col(x.data().data() + s * in_stride, g, col->data(), np, s * p);
  std::vector<double> mat(g.f * np, 0.0);
  kernels::gemm_acc(w.data().data(), col->data(), mat.data(), g.f, ckk, np);
  std::vector<double> out(g.n * g.f * p);
  for (std::size_t s = 0; s < g.n; ++s)
    for (std::size_t f = 0; f < g.f; ++f)
      std::copy_n(mat.data() + f * np + s * p, p, out.data() + (s * g.f + f) * p);

  return detail::make_result(
      "conv2d", {g.n, g.f, g.ho, g.wo}, std::move(out), {x, w}, [w, g, col](auto gout, GradSpan gin) {
        const std::size_t p = g.positions(), ckk = g.ckk(), np = g.n * p;
        const std::size_t in_stride = g.c * g.h * g.w;
        std::vector<double> gmat(g.f * np);
        for (std::size_t s = 0; s < g.n; ++s)
          for (std::size_t f = 0; f < g.f; ++f)
            std::copy_n(gout.data() + (s * g.f + f) * p, p, gmat.data() + f * np + s * p);
        if (gin[1]) {
          std::vector<double> col_t(np * ckk);
          kernels::transpose(col->data(), col_t.data(), ckk, np);
          kernels::gemm_acc(gmat.data(), col_t.data(), gin[1]->data(), g.f, np, ckk);
        }
        if (gin[0]) {
          std::vector<double> w_t(ckk * g.f);
          kernels::transpose(w.data().data(), w_t.data(), g.f, ckk);
          std::vector<double> dcol(ckk * np, 0.0);
          kernels::gemm_acc(w_t.data(), gmat.data(), dcol.data(), ckk, g.f, np);
          for (std::size_t s = 0; s < g.n; ++s) col2im_acc(dcol.data(), g, gin[0]->data() + s * in_stride, np, s * p);
        }
      });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, BnMode mode,
                 const BatchNormConfig& config) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError("batchnorm: expected [N x C] or [N x C x H x W], got " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const Shape channel_shape{c};
  if (gamma.shape() != channel_shape || beta.shape() != channel_shape ||
      running_mean.shape() != channel_shape || running_var.shape() != channel_shape) {
    throw DimensionError("batchnorm: per-channel parameters must have shape " +
                         shape_str(channel_shape) + " for input " + shape_str(x.shape()));
  }
  const std::size_t count = n * hw;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(x.numel());

  if (mode == BnMode::eval) {
    std::vector<double> inv_std(c), shift(c), scale_c(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      inv_std[ch] = 1.0 / std::sqrt(running_var.data()[ch] + config.eps);
      scale_c[ch] = gd[ch] / std::sqrt(running_var.data()[ch] + config.eps);
      shift[ch] = running_mean.data()[ch];
    }
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (s * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i)
          out[base + i] = (xd[base + i] - shift[ch]) * scale_c[ch] + bd[ch];
      }
    return detail::make_result(
        "batchnorm_eval", x.shape(), std::move(out), {x, gamma, beta},
        [x, n, c, hw, inv_std, shift, scale_c](auto gout, GradSpan gin) {
          const auto xd = x.data();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (s * c + ch) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                const double go = gout[base + i];
                if (gin[0]) (*gin[0])[base + i] += go * scale_c[ch];
                if (gin[1]) (*gin[1])[ch] += go * (xd[base + i] - shift[ch]) * inv_std[ch];
                if (gin[2]) (*gin[2])[ch] += go;
              }
            }
        });
  }

  if (count < 2) {
    throw UsageError("batchnorm: train mode needs at least 2 values per channel, input " +
                     shape_str(x.shape()));
  }
  std::vector<double> mean_c(c, 0.0), var_c(c, 0.0), inv_std(c);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) mean_c[ch] += xd[base + i];
    }
  for (std::size_t ch = 0; ch < c; ++ch) mean_c[ch] /= static_cast<double>(count);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = xd[base + i] - mean_c[ch];
        var_c[ch] += d * d;
      }
    }
  for (std::size_t ch = 0; ch < c; ++ch) {
    var_c[ch] /= static_cast<double>(count);
    inv_std[ch] = 1.0 / std::sqrt(var_c[ch] + config.eps);
  }
  std::vector<double> xhat(x.numel());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (xd[base + i] - mean_c[ch]) * inv_std[ch];
        out[base + i] = gd[ch] * xhat[base + i] + bd[ch];
      }
    }

  auto rm = running_mean.mutable_data();
  auto rv = running_var.mutable_data();
  const double m = config.momentum;
  const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
  for (std::size_t ch = 0; ch < c; ++ch) {
    rm[ch] = (1.0 - m) * rm[ch] + m * mean_c[ch];
    rv[ch] = (1.0 - m) * rv[ch] + m * var_c[ch] * unbias;
  }

  return detail::make_result(
      "batchnorm_train", x.shape(), std::move(out), {x, gamma, beta},
      [gamma, n, c, hw, count, inv_std, xhat = std::move(xhat)](auto gout, GradSpan gin) {
        const auto gd = gamma.data();
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_dy[ch] += gout[base + i];
              sum_dy_xhat[ch] += gout[base + i] * xhat[base + i];
            }
          }
        if (gin[1])
          for (std::size_t ch = 0; ch < c; ++ch) (*gin[1])[ch] += sum_dy_xhat[ch];
        if (gin[2])
          for (std::size_t ch = 0; ch < c; ++ch) (*gin[2])[ch] += sum_dy[ch];
        if (!gin[0]) return;
        const double inv_count = 1.0 / static_cast<double>(count);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * hw;
            const double k = gd[ch] * inv_std[ch];
            const double mean_dy = sum_dy[ch] * inv_count;
            const double mean_dy_xhat = sum_dy_xhat[ch] * inv_count;
            for (std::size_t i = 0; i < hw; ++i) {
              (*gin[0])[base + i] +=
                  k * (gout[base + i] - mean_dy - xhat[base + i] * mean_dy_xhat);
            }
          }
      });
}

Tensor relu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return detail::make_result("relu", x.shape(), std::move(out), {x}, [x](auto gout, GradSpan gin) {
    const auto xd = x.data();
    auto& g = *gin[0];
    for (std::size_t i = 0; i < xd.size(); ++i)
      if (xd[i] > 0.0) g[i] += gout[i];
  });
}

Tensor tanh(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = std::tanh(xd[i]);
  std::vector<double> saved = out;
  return detail::make_result(
      "tanh", x.shape(), std::move(out), {x}, [y = std::move(saved)](auto gout, GradSpan gin) {
        auto& g = *gin[0];
        for (std::size_t i = 0; i < y.size(); ++i) g[i] += gout[i] * (1.0 - y[i] * y[i]);
      });
}

Tensor avgpool_global(const Tensor& x) {
  require_rank(x, 4, "avgpool_global");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xd = x.data();
  std::vector<double> out(n * c, 0.0);
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t r = 0; r < n * c; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xd[r * hw + i];
    out[r] = acc * inv;
  }
  return detail::make_result("avgpool_global", {n, c}, std::move(out), {x},
                             [n, c, hw, inv](auto gout, GradSpan gin) {
                               auto& g = *gin[0];
                               for (std::size_t r = 0; r < n * c; ++r)
                                 for (std::size_t i = 0; i < hw; ++i) g[r * hw + i] += gout[r] * inv;
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](auto gout, GradSpan gin) {
    for (auto* g : gin)
      if (g)
        for (std::size_t i = 0; i < gout.size(); ++i) (*g)[i] += gout[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](auto gout, GradSpan gin) {
    if (gin[0])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
    if (gin[1])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[1])[i] -= gout[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](auto gout, GradSpan gin) {
    const auto ad = a.data(), bd = b.data();
    if (gin[0])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * bd[i];
    if (gin[1])
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[1])[i] += gout[i] * ad[i];
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_rowwise");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.shape() != Shape{n}) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  const auto xd = x.data(), bd = bias.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xd[i * n + j] + bd[j];
  return detail::make_result("add_rowwise", x.shape(), std::move(out), {x, bias},
                             [m, n](auto gout, GradSpan gin) {
                               if (gin[0])
                                 for (std::size_t i = 0; i < m * n; ++i) (*gin[0])[i] += gout[i];
                               if (gin[1])
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     (*gin[1])[j] += gout[i * n + j];
                             });
}

Tensor scale(const Tensor& x, double factor) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * factor;
  return detail::make_result("scale", x.shape(), std::move(out), {x},
                             [factor](auto gout, GradSpan gin) {
                               for (std::size_t i = 0; i < gout.size(); ++i)
                                 (*gin[0])[i] += gout[i] * factor;
                             });
}

Tensor elementwise_mean(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw UsageError("elementwise_mean of zero tensors");
  for (const auto& x : xs) require_same_shape(xs.front(), x, "elementwise_mean");
  const double n = static_cast<double>(xs.size());
  std::vector<double> out(xs.front().numel(), 0.0);
  for (const auto& x : xs) {
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += xd[i];
  }
  for (double& v : out) v /= n;
  return detail::make_result("elementwise_mean", xs.front().shape(), std::move(out), xs,
                             [n](auto gout, GradSpan gin) {
                               for (auto* g : gin) {
                                 if (!g) continue;
                                 for (std::size_t i = 0; i < gout.size(); ++i) (*g)[i] += gout[i] / n;
                               }
                             });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_result("sum", {}, {acc}, {x}, [](auto gout, GradSpan gin) {
    for (double& g : *gin[0]) g += gout[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                             [](auto gout, GradSpan gin) {
                               for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
                             });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax: needs at least one axis");
  check_finite(x, "softmax");
  const std::size_t cols = x.shape().back(), rows = x.numel() / cols;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= z;
  }
  std::vector<double> saved = out;
  return detail::make_result(
      "softmax", x.shape(), std::move(out), {x},
      [y = std::move(saved), rows, cols](auto gout, GradSpan gin) {
        auto& g = *gin[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += gout[base + j] * y[base + j];
          for (std::size_t j = 0; j < cols; ++j) g[base + j] += y[base + j] * (gout[base + j] - dot);
        }
      });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax: needs at least one axis");
  check_finite(x, "log_softmax");
  const std::size_t cols = x.shape().back(), rows = x.numel() / cols;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) o[j] = in[j] - lse;
  }
  std::vector<double> probs(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) probs[i] = std::exp(out[i]);
  return detail::make_result(
      "log_softmax", x.shape(), std::move(out), {x},
      [p = std::move(probs), rows, cols](auto gout, GradSpan gin) {
        auto& g = *gin[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * cols;
          double total = 0.0;
          for (std::size_t j = 0; j < cols; ++j) total += gout[base + j];
          for (std::size_t j = 0; j < cols; ++j) g[base + j] += gout[base + j] - p[base + j] * total;
        }
      });
}

}  // namespace bkd
