#pragma once

// Differentiable primitives recorded on a Tape. Each op validates shapes,
// computes its forward value with the kernels in kernels.hpp where one
// exists, and registers a backward closure.

#include <optional>
#include <vector>

#include "partcat/tape.hpp"

namespace partcat::ops {

template <typename T> Var add(Tape<T>& t, Var a, Var b);
template <typename T> Var sub(Tape<T>& t, Var a, Var b);
template <typename T> Var mul(Tape<T>& t, Var a, Var b);

/// x + y where y's shape equals the trailing dimensions of x.
template <typename T> Var add_broadcast(Tape<T>& t, Var x, Var y);
/// x ⊙ y where y's shape equals the trailing dimensions of x.
template <typename T> Var mul_broadcast(Tape<T>& t, Var x, Var y);

template <typename T> Var scale(Tape<T>& t, Var x, T s);
template <typename T> Var add_scalar(Tape<T>& t, Var x, T s);

/// Standard product of 2-D arrays.
template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
/// a · bᵀ for 2-D arrays sharing their column count.
template <typename T> Var matmul_bt(Tape<T>& t, Var a, Var b);
/// x[..., d_in] · w[d_in×d_out] (+ b[d_out]).
template <typename T> Var linear(Tape<T>& t, Var x, Var w, std::optional<Var> b = std::nullopt);

template <typename T> Var softmax(Tape<T>& t, Var x, std::size_t axis);
template <typename T> Var sigmoid(Tape<T>& t, Var x);
template <typename T> Var gelu(Tape<T>& t, Var x);
/// log(max(x, floor)); gradient is zero where the floor is active.
template <typename T> Var log_clamped(Tape<T>& t, Var x, T floor);

/// Normalizes over the last axis, then applies per-channel gain and bias.
template <typename T> Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps = T(1e-5));

/// Multi-head scaled dot-product attention, scale 1/sqrt(d_k/heads).
/// Rank 2 ([L×d]) or batched rank 3 ([B×L×d]). Optional additive logit bias [heads×Lq×Lk].
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::size_t heads,
              std::optional<Var> bias = std::nullopt);

/// Same-padded 2-D correlation: x [H×W×c_in] or [B×H×W×c_in], kernel [k×k×c_in×c_out], odd k.
template <typename T>
Var conv2d(Tape<T>& t, Var x, Var kernel, std::optional<Var> bias = std::nullopt);

/// [A×B×C] -> [B×A×C]
template <typename T> Var transpose01(Tape<T>& t, Var x);
template <typename T> Var reshape(Tape<T>& t, Var x, Shape shape);
/// Concatenates along the last axis; leading dimensions must agree.
template <typename T> Var concat_last(Tape<T>& t, Var a, Var b);
/// Selects slices along axis 1 of a rank-3 array: out[:, j, :] = x[:, index[j], :].
template <typename T> Var gather_axis1(Tape<T>& t, Var x, std::vector<std::size_t> index);
/// out.flat[j] = table.flat[index[j]], reshaped to `shape`.
template <typename T> Var gather_flat(Tape<T>& t, Var table, std::vector<std::size_t> index, Shape shape);

/// Scales each last-axis vector to unit L2 norm. Zero-norm vectors are an error.
template <typename T> Var l2_normalize_last(Tape<T>& t, Var x);
/// Divides each last-axis vector by its sum. Zero-sum vectors are an error.
template <typename T> Var l1_normalize_last(Tape<T>& t, Var x);

/// [..., n] -> [...]; a rank-1 input reduces to shape {1}.
template <typename T> Var sum_last(Tape<T>& t, Var x);
template <typename T> Var sum(Tape<T>& t, Var x);
template <typename T> Var mean(Tape<T>& t, Var x);

/// Nearest-neighbour upsampling of [B×H×W×C] by an integer factor.
template <typename T> Var upsample_nearest(Tape<T>& t, Var x, std::size_t factor);

}  // namespace partcat::ops
