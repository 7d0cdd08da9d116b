#pragma once

#include <cstdint>
#include <vector>

#include "nictkit/geometry.hpp"
#include "nictkit/tensor.hpp"

namespace nictkit::ad {

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
/// a + b where b's shape equals the trailing dims of a.
Tensor add_broadcast(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

/// x[..., in] -> [..., out] with weight [out, in] and optional bias [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
/// Batched matmul over equal leading dims: [..., m, k] x [..., k, n]
/// (or [..., n, k] when transpose_b).
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x[B, C, H, W] * w[O, C, kh, kw] (+ bias[O]).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, std::size_t stride = 1,
              std::size_t pad = 0);

/// Normalises over the last dim; eps = 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
/// Over the last dim, max-subtracted.
Tensor softmax(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
/// [B, C, H, W] -> [B, C, 2H, 2W]
Tensor upsample_nearest2x(const Tensor& x);

/// [B, H, W, C] -> [B * nW, ws*ws, C], after rolling by -shift on H and W.
Tensor window_partition(const Tensor& x, std::size_t window, std::size_t shift);
/// Inverse of window_partition for a [B, H, W, C] target.
Tensor window_reverse(const Tensor& windows, std::size_t batch, std::size_t height, std::size_t width,
                      std::size_t window, std::size_t shift);
/// [B, C, H, W] -> [B, H/p, W/p, C*p*p] (non-overlapping patches, C-major then row then col)
Tensor patchify(const Tensor& x, std::size_t patch);
/// Inverse of patchify: [B, h, w, C*p*p] -> [B, C, h*p, w*p]
Tensor unpatchify(const Tensor& x, std::size_t patch, std::size_t channels);
/// out[i] = x.flat[index[i]], shaped `shape`. Backward scatter-adds.
Tensor gather(const Tensor& x, Shape shape, std::vector<std::uint32_t> index, const char* kernel = "gather");

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Parallel-beam projection of x[B, 1, S, S] -> [B, 1, views, detectors].
/// Backward is back_project, the exact transpose.
Tensor radon(const Tensor& x, const ProjectionGeometry& geom);

}  // namespace nictkit::ad
