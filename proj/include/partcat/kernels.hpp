#pragma once

// OpenMP-parallel dense kernels. Every kernel parallelizes over independent
// outputs only and accumulates each output in a fixed order, so results are
// bit-identical for any thread count. The serial counterparts live in
// reference.hpp and are kept for tests and benchmarks.

#include <cstddef>
#include <span>

namespace partcat::kernels {

/// c[m×n] (+)= a[m×k] · b[k×n]
template <typename T>
void matmul_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);

/// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
template <typename T>
void matmul_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);

/// c[m×n] (+)= a[k×m]ᵀ · b[k×n]
template <typename T>
void matmul_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false);

struct ConvDims {
    std::size_t batch, height, width, c_in, c_out, ksize;
};

/// Same-padded 2-D correlation, NHWC input, kernel [k×k×c_in×c_out].
/// Bias (may be empty) is added after the window sum.
template <typename T>
void conv2d_forward(std::span<const T> x, std::span<const T> kernel, std::span<const T> bias,
                    std::span<T> out, const ConvDims& dims);

/// Gradients of conv2d_forward. Empty spans skip that gradient; all outputs accumulate.
template <typename T>
void conv2d_backward(std::span<const T> x, std::span<const T> kernel, std::span<const T> dout,
                     std::span<T> dx, std::span<T> dkernel, std::span<T> dbias,
                     const ConvDims& dims);

struct AttentionDims {
    std::size_t batch, len_q, len_k, d_k, d_v, heads;
};

/// Batched multi-head scaled dot-product attention.
/// q [B×Lq×dk], k [B×Lk×dk], v [B×Lk×dv]; head h uses column block h of each.
/// `bias` is empty or [heads×Lq×Lk], shared across the batch and added to logits.
/// `probs` receives the attention weights [B×heads×Lq×Lk].
template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                       std::span<const T> bias, std::span<T> probs, std::span<T> out,
                       const AttentionDims& dims);

/// Gradients of attention_forward; all gradient outputs accumulate, empty spans are skipped.
template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq,
                        std::span<T> dk, std::span<T> dv, std::span<T> dbias,
                        const AttentionDims& dims);

/// Row softmax over the last axis of a [rows×n] buffer, max-subtracted.
template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> out, std::size_t rows, std::size_t n);

}  // namespace partcat::kernels
