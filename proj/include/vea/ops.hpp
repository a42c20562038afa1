#pragma once

#include <span>
#include <vector>

#include "vea/tensor.hpp"

namespace vea {

// ---- differentiable ops (recorded on the tape when an input requires grad) --

/// Elementwise with right-aligned broadcasting (dims must match or be 1).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);

/// Batched matrix product. `a` is [..., m, k]; `b` is either [k, n] /
/// [n, k] (shared across all leading dims of `a`) or carries identical
/// leading dims. With transpose_b the last two dims of `b` are swapped.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Numerically stabilized softmax along `axis` (negative axes allowed).
Tensor softmax(const Tensor& x, int axis);

/// Layer normalization over the last axis; gamma/beta have that extent.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-6);

/// Mean cross-entropy of logits [B, K] against labels [B] ( -log softmax ).
Tensor cross_entropy(const Tensor& logits, std::span<const int64_t> labels);
/// Single-example form: logits [K] or [1, K].
Tensor cross_entropy(const Tensor& logits, int64_t label);
/// Per-example losses [B] without reduction.
Tensor cross_entropy_per_example(const Tensor& logits, std::span<const int64_t> labels);

Tensor gelu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose_dims(const Tensor& x, std::vector<int> perm);
Tensor slice_axis(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor concat_axis(const Tensor& a, const Tensor& b, int axis);
Tensor broadcast_to(const Tensor& x, Shape shape);

/// Reorders the slices of `x` along `axis`: out[..., i, ...] = x[..., perm[i], ...].
Tensor permute_rows(const Tensor& x, std::span<const int64_t> perm, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Depthwise 2-D convolution of [B, C, H, W] (or [C, H, W]) with one fixed
/// [kh, kw] kernel shared by all channels; zero padding, shape preserved.
/// The kernel is a constant: no gradient flows into it.
Tensor conv2d_fixed_kernel(const Tensor& x, const Tensor& kernel);

/// Differentiable bilinear resize of [B, C, H, W] to [B, C, out_h, out_w].
Tensor bilinear_resize(const Tensor& x, int64_t out_h, int64_t out_w);

/// Zero-pad [B, C, H, W] into an [out_h, out_w] canvas at (top, left).
Tensor pad2d(const Tensor& x, int64_t top, int64_t left, int64_t out_h, int64_t out_w);

/// [B, C, H, W] -> [B, (H/p)*(W/p), p*p*C] non-overlapping patch unfold.
Tensor extract_patches(const Tensor& x, int64_t patch);

// ---- value-only ops (never recorded on the tape) ------------------------

/// sign(0) = 0.
Tensor sign(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
/// Elementwise clamp to per-element bounds (for the eps-ball projection).
Tensor clamp_to(const Tensor& x, const Tensor& lo, const Tensor& hi);

std::vector<int64_t> argmax_rows(const Tensor& logits);
double linf_distance(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

}  // namespace vea
