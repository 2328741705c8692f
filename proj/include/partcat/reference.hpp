#pragma once

// Serial reference implementations of the dense kernels. Straight loops, no
// blocking, same accumulation order as the parallel kernels. Used by the
// kernel tests and the benchmark; not on the training path.

#include <cstddef>
#include <span>

#include "partcat/kernels.hpp"

namespace partcat::reference {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
            std::size_t k, std::size_t n);

template <typename T>
void conv2d(std::span<const T> x, std::span<const T> kernel, std::span<const T> bias,
            std::span<T> out, const kernels::ConvDims& dims);

template <typename T>
void attention(std::span<const T> q, std::span<const T> k, std::span<const T> v,
               std::span<const T> bias, std::span<T> out, const kernels::AttentionDims& dims);

template <typename T>
void softmax_rows(std::span<const T> x, std::span<T> out, std::size_t rows, std::size_t n);

}  // namespace partcat::reference
