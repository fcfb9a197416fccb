#pragma once

// Differentiable primitives. Unless stated otherwise every op treats a tensor
// as a row-major [rows x cols] matrix, where cols is the last axis.

#include <cstdint>
#include <span>
#include <vector>

#include "bimot/tensor.hpp"

namespace bimot {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a [m x k] times b^T for b [n x k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);

// x [r x c] (+|*) row vector v [c], broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& v);
template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& v);
// x [r x c] * column s [r]: scales row i by s[i].
template <typename T>
Tensor<T> mul_col(const Tensor<T>& x, const Tensor<T>& s);

// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// Gradient passes only where lo < x < hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

// Softmax along `axis` (negative counts from the end), max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1);

inline constexpr double kLayerNormEps = 1e-5;
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = kLayerNormEps);

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids);

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Gather: out row i = x row rows[i]. Repeated rows accumulate gradient.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> rows);
// out = dest with row positions[i] replaced by src row i. Positions must be distinct.
template <typename T>
Tensor<T> scatter_by_index(const Tensor<T>& dest, const Tensor<T>& src,
                           std::span<const std::size_t> positions);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// [r x c] -> [r]: per-row sum of squares.
template <typename T>
Tensor<T> row_sum_squares(const Tensor<T>& x);
// Mean of (a - b)^2 over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
// Mean of smooth-L1 (Huber, delta 1) over all elements.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a, const Tensor<T>& b);

// Rows divided by their L2 norm.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);

struct RowSegment {
  std::size_t begin;
  std::size_t length;
};
// [sum(length) x c] -> [segments x c], averaging each segment's rows.
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const RowSegment> segments);

// Mean token negative log-likelihood over rows with mask[i] != 0.
// Targets of masked-out rows are ignored.
template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, std::span<const int> targets,
                               std::span<const std::uint8_t> mask);

struct AttentionSegment {
  std::size_t q_begin;
  std::size_t q_length;
  std::size_t kv_begin;
  std::size_t kv_length;
};

struct AttentionLayout {
  std::vector<AttentionSegment> segments;
  // Key j visible to query i (segment-local) only when j <= i. Requires q_length == kv_length.
  bool causal = false;
  // Optional per-row stream id (query rows and key rows index the same array):
  // a key is visible only to queries of the same stream.
  std::vector<std::uint8_t> stream;
};

// Multi-head scaled dot-product attention, evaluated independently per segment.
// q [Nq x d], k and v [Nk x d]; d divisible by heads. Returns [Nq x d].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const AttentionLayout& layout);

}  // namespace bimot
