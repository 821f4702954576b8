#pragma once

#include "xmreid/tensor.hpp"

#include <span>
#include <vector>

// Differentiable primitives. Every op here is registered with the
// finite-difference suite in gradcheck.cpp.
namespace xmreid {

inline constexpr double kLogClamp = 1e-7;

// Linear algebra and elementwise arithmetic.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// x[N x F] + bias[F], bias broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Nonlinearities.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Natural log of max(x, 1e-7); zero gradient where the clamp is active.
Tensor log_clamped(const Tensor& x);
/// Softmax over the last axis of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& logits);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over spatial axes: [C,H,W] -> [C], [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);
/// Each row (or the whole rank-1 tensor) divided by its Euclidean norm.
Tensor l2_normalize(const Tensor& x);

// Structural.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor reshape(const Tensor& x, Shape shape);
/// Flat-index gather into a rank-1 tensor.
Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices);

// Convolution and normalisation.
/// Cross-correlation with zero padding. x is [C,H,W] or [N,C,H,W];
/// w is [C_out, C_in, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);

enum class BatchNormMode {
  train,         // batch statistics; running statistics updated
  train_frozen,  // batch statistics; running statistics untouched
  eval,          // running statistics
};

/// Per-channel normalisation of [N,C,H,W] or [N,C]. running_mean and
/// running_var are plain buffers of shape [C].
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BatchNormMode mode, double momentum = 0.1,
                  double eps = 1e-5);

// Losses and metric-learning helpers.
/// Mean over rows of -log softmax(logits)[label], stabilised via log-sum-exp.
/// logits is [C] (one label) or [N,C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Euclidean distances between all rows of x[M,d]; the subgradient at zero
/// distance is taken to be zero.
Tensor pairwise_distances(const Tensor& x);

}  // namespace xmreid
