#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ddpe/tensor.hpp"

namespace ddpe {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// x: B x In, weight: Out x In, bias: Out (may be undefined) -> B x Out.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Cross-correlation with a separate kernel set per batch element.
// input: B x Cin x H x W, kernels: B x Cout x Cin x K x K.
template <typename T>
Tensor<T> conv2d_per_instance(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride, std::size_t pad);

// Repeats a tensor along a new leading batch axis; gradient sums over it.
template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch);

// Per-instance, per-channel normalization over H x W with a learnable
// per-channel scale and shift. No running statistics.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps = T(1e-5));

// Non-overlapping window average; trailing rows/cols that do not fill a
// window are dropped.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> labels);

// out[b] = x[index[b]] along the leading axis of a B x M matrix.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index);

// out[b][m] = x[b][perms[b][m]].
template <typename T>
Tensor<T> permute_within_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& perms);

} // namespace ddpe
