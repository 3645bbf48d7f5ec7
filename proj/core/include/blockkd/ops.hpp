#pragma once

#include "blockkd/tensor.hpp"

namespace bkd {

// Differentiable primitives. Shapes follow NCHW for images and [batch x
// features] for vectors. All reductions run in a fixed row-major order, so a
// forward pass is bit-reproducible for identical inputs.

/// [m x k] x [k x p] -> [m x p].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of x [N x C x H x W] with w [F x C x kh x kw], kh and kw
/// in {1, 3}. Output size per axis is floor((H + 2*padding - kh) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

enum class BnMode { train, eval };

struct BatchNormConfig {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel normalization over N (and H, W for 4-d input). In train mode
/// the batch statistics are used and running_mean / running_var are updated
/// in place (running_var receives the unbiased batch variance).
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, BnMode mode,
                 const BatchNormConfig& config = {});

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

/// [N x C x H x W] -> [N x C].
Tensor avgpool_global(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x [m x n] plus bias [n] broadcast over rows.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);

/// Sum of every element, as a scalar.
/// (x_1 + ... + x_n) / n, summed in the given order.
Tensor elementwise_mean(const std::vector<Tensor>& xs);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// Throws NumericError naming the tensor if any element is NaN or infinite.
void check_finite(const Tensor& x, const char* context);

}  // namespace bkd
