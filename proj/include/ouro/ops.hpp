#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ouro/tensor.hpp"

namespace ouro {

// Differentiable free functions over Tensor<T>. Broadcasting is limited to
// what each op documents (trailing-dimension bias, per-batch row scaling);
// everything else requires equal shapes.

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., in] · w[out, in]ᵀ -> [..., out]
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);
// linear plus a bias over the trailing dimension.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// x[..., d] + b[d]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);

// g ⊙ a + (1 − g) ⊙ b, all of one shape.
template <typename T> Tensor<T> blend(const Tensor<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Per trailing row: x / sqrt(mean(x²) + eps) ⊙ gamma.
template <typename T> Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gamma, T eps);

// Mean over masked-in time steps. h: [B, T, d], mask: [B, T] of {0, 1}.
template <typename T> Tensor<T> mean_pool(const Tensor<T>& h, const Tensor<T>& mask);

// Mean negative log-softmax over positions whose ignore flag is 0. An empty
// ignore span means nothing is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> ignore = {});

// table[V, d] gathered by tokens -> [B, T, d]
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> tokens, Index batch, Index seq);

// Rotary position embedding on x[B, T, heads·head_dim]. Positions default to
// 0..T−1; an explicit list must have T entries.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, Index head_dim, double theta, std::span<const Index> positions = {});

// Causal softmax attention with grouped key/value heads.
// q: [B, T, n_heads·hd], k, v: [B, T, n_kv_heads·hd] -> [B, T, n_heads·hd]
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index n_heads,
                           Index n_kv_heads);

template <typename T> Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);

// v[...] repeated as rows -> [n, ...]
template <typename T> Tensor<T> tile_rows(const Tensor<T>& v, Index n);

// table[N, ...] -> table[i]
template <typename T> Tensor<T> select_row(const Tensor<T>& table, Index i);

// x[B, K, r] -> x[:, k, :] as [B, r]
template <typename T> Tensor<T> select_middle(const Tensor<T>& x, Index k);

// u[B, T, r] ⊙ d[B, r] broadcast over T.
template <typename T> Tensor<T> scale_rows_per_batch(const Tensor<T>& u, const Tensor<T>& d);

#define OURO_DECLARE_OPS(T)                                                                         \
  extern template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  extern template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                            \
  extern template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  extern template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  extern template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  extern template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  extern template Tensor<T> scale(const Tensor<T>&, T);                                            \
  extern template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                          \
  extern template Tensor<T> sigmoid(const Tensor<T>&);                                             \
  extern template Tensor<T> silu(const Tensor<T>&);                                                \
  extern template Tensor<T> blend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  extern template Tensor<T> sum(const Tensor<T>&);                                                 \
  extern template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  extern template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                       \
  extern template Tensor<T> mean_pool(const Tensor<T>&, const Tensor<T>&);                         \
  extern template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,         \
                                          std::span<const std::uint8_t>);                          \
  extern template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, Index, Index); \
  extern template Tensor<T> rope(const Tensor<T>&, Index, double, std::span<const Index>);         \
  extern template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                             Index, Index);                                        \
  extern template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> tile_rows(const Tensor<T>&, Index);                                    \
  extern template Tensor<T> select_row(const Tensor<T>&, Index);                                   \
  extern template Tensor<T> select_middle(const Tensor<T>&, Index);                                \
  extern template Tensor<T> scale_rows_per_batch(const Tensor<T>&, const Tensor<T>&);

OURO_DECLARE_OPS(float)
OURO_DECLARE_OPS(double)
#undef OURO_DECLARE_OPS

}  // namespace ouro
