#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vitfl/tensor.hpp"

// Differentiable operations. Unless stated otherwise, 2-D inputs are
// [rows x cols] and 4-D image tensors are [batch x channels x height x width].
namespace vitfl::ops {

Tensor matmul(const Tensor& a, const Tensor& b);

/// x[m x in] * weight[out x in]^T + bias[out]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor relu(const Tensor& x);
// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

/// Adds `pattern` repeatedly along the leading elements of x; x.numel() must
/// be a multiple of pattern.numel(). Used for positional embeddings.
Tensor add_tiled(const Tensor& x, const Tensor& pattern);

Tensor softmax_rows(const Tensor& x);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Row-wise layer normalization with affine gamma/beta of length cols.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Multi-head scaled dot-product self-attention.
/// qkv: [batch*tokens x 3*dim], laid out as [q | k | v] with heads occupying
/// contiguous dim/heads slices. Returns [batch*tokens x dim]. If
/// `weights_out` is non-null it receives the attention probabilities as
/// [batch x heads x tokens x tokens].
Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                 std::vector<double>* weights_out = nullptr);

/// 2-D convolution with square kernel; bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// Batch normalization over (batch, height, width) per channel. In training
/// mode the running statistics are updated in place with the given momentum
/// (unbiased variance); in evaluation mode they are used for normalization.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::span<double> running_mean, std::span<double> running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

/// [n x c x h x w] -> [n x c]
Tensor global_avg_pool(const Tensor& x);

/// [batch*tokens x d] -> [batch x d], averaging each group of `tokens` rows.
Tensor mean_tokens(const Tensor& x, std::size_t tokens);

/// [n x c x h x w] -> [n*(h/p)*(w/p) x c*p*p]; patches in row-major order,
/// each flattened channel-major.
Tensor patchify(const Tensor& x, std::size_t patch);

/// Cosine similarity of corresponding rows: [m x d], [m x d] -> [m].
/// Norms are regularized as sqrt(|v|^2 + eps).
Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps = 1e-12);

/// Stacks k tensors of m elements each as the columns of an [m x k] tensor.
Tensor concat_cols(const std::vector<Tensor>& columns);

}  // namespace vitfl::ops
