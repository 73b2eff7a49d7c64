#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pop/tensor.hpp"

// Differentiable operations. Every op takes the step's tape first; when the
// tape records and any input requires grad, the op appends its backward rule.
// Matrix-shaped ops read tensors as [rows x cols] with cols = last extent.
namespace pop::ops {

/// a[m x k] . b[k x n]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// x[m x k] . w[k x n] + bias[n]; bias may be undefined.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

// Adds `rows` [k x d] to every consecutive block of k rows in x [batch*k x d].
template <typename T>
Tensor<T> add_blockwise(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& rows);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// Weighted sum of scalar tensors; zero-weight terms are dropped.
template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, std::span<const Tensor<T>> terms, std::span<const T> weights);

/// Softmax along `axis` with max subtraction. Non-finite input throws.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, std::size_t axis);

/// Normalizes each row over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// x * Phi(x) with the exact Gaussian CDF.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

/// Mean over the batch of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> targets);

/// Multi-head self-attention core: qkv [batch*tokens x 3d] laid out as
/// [Q | K | V] per row, heads split d evenly. Returns [batch*tokens x d].
template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& qkv, std::size_t batch, std::size_t tokens,
                         std::size_t heads);

/// Attention probabilities [batch x heads x tokens x tokens] for inspection.
template <typename T>
std::vector<T> attention_weights(const Tensor<T>& qkv, std::size_t batch, std::size_t tokens,
                                 std::size_t heads);

/// A run of token rows fed into `assemble_tokens`. Per-sample segments carry
/// batch*count rows; shared segments carry count rows repeated for each sample.
template <typename T>
struct TokenSegment {
  Tensor<T> rows;
  bool shared = false;
};

/// Concatenates segments token-wise per sample:
/// out[b] = [seg0[b], seg1[b], ...], giving [batch*tokens x d].
template <typename T>
Tensor<T> assemble_tokens(Tape<T>& tape, std::size_t batch, std::span<const TokenSegment<T>> segments);

/// Rows [begin, begin+count) of every sample's token block.
template <typename T>
Tensor<T> take_tokens(Tape<T>& tape, const Tensor<T>& x, std::size_t batch, std::size_t tokens,
                      std::size_t begin, std::size_t count);

/// Mean of each consecutive group of `group` rows: [n*group x d] -> [n x d].
template <typename T>
Tensor<T> group_mean(Tape<T>& tape, const Tensor<T>& x, std::size_t group);

/// Column-wise concatenation of [n x d_i] inputs.
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, std::span<const Tensor<T>> parts);

/// Element-wise maximum across equally shaped inputs; ties go to the first.
template <typename T>
Tensor<T> elementwise_max(Tape<T>& tape, std::span<const Tensor<T>> parts);

}  // namespace pop::ops
