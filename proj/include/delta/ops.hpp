#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "delta/tensor.hpp"

namespace delta {

using Label = std::uint32_t;

// Elementwise and reductions. Binary ops require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
/// Σ a², as a scalar.
Tensor sum_squares(const Tensor& a);
/// Σ (a - b)², as a scalar. Gradients flow to both operands.
Tensor squared_distance(const Tensor& a, const Tensor& b);

/// Weights, bias and geometry of one convolution layer.
///
/// weight is (c_out, c_in, k_h, k_w), bias is (c_out). The operation is a
/// cross-correlation: out[co, y, x] = bias[co] + sum over (ci, ky, kx) of
/// weight[co, ci, ky, kx] * in[ci, y*stride + ky - padding, x*stride + kx - padding],
/// with zeros outside the input.
struct ConvKernel {
    Tensor weight;
    Tensor bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Output spatial extent of a convolution; throws ConfigError when the window
/// does not tile the padded input exactly.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

Tensor conv2d(const Tensor& input, const ConvKernel& kernel);
Tensor relu(const Tensor& input);
/// input (B, in), weight (out, in), bias (out) -> (B, out).
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
/// Non-overlapping or strided max pooling without padding; output extent is floor((H - size) / stride) + 1.
/// Ties resolve to the first maximum in row-major window order.
Tensor max_pool2d(const Tensor& input, std::size_t size = 2, std::size_t stride = 2);
/// (B, C, H, W) -> (B, C) spatial mean.
Tensor global_avg_pool(const Tensor& input);
/// (B, ...) -> (B, prod(...)).
Tensor flatten(const Tensor& input);

/// Mean over the batch of -log softmax(logits)[label], max-subtracted.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const Label> labels);
/// Per-row cross-entropy values; same arithmetic as softmax_cross_entropy, no graph.
std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const Label> labels);
/// Row-wise softmax probabilities of a (B, K) tensor, no graph.
std::vector<double> softmax_rows(const Tensor& logits);
/// Softmax of a plain vector (max-subtracted).
std::vector<double> softmax(std::span<const double> values);

/// Channel `channel` of sample `sample` of a (B, C, H, W) tensor, flattened
/// row-major to shape (H*W). Differentiable.
Tensor select_feature_map(const Tensor& input, std::size_t sample, std::size_t channel);

/// sum over (b, c) of weights[b*C + c] * channel_scale * ||act[b, c] - ref[b, c]||^2.
///
/// `ref` is treated as a constant. With `channel_scale = 1/(H*W)` this becomes
/// a per-area mean distance.
Tensor weighted_channel_sq_distance(const Tensor& act, const Tensor& ref, std::span<const double> weights,
                                    double channel_scale = 1.0);

}  // namespace delta
