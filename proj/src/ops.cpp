#include "nictkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "nictkit/error.hpp"
#include "nictkit/parallel.hpp"

namespace nictkit::ad {
namespace {

void require_same(const Tensor& a, const Tensor& b, const char* kernel) {
    if (a.shape() != b.shape())
        throw ShapeMismatch(std::string(kernel) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void require_rank(const Tensor& t, std::size_t r, const char* kernel) {
    if (t.rank() != r)
        throw ShapeMismatch(std::string(kernel) + ": expected rank " + std::to_string(r) + ", got " +
                            to_string(t.shape()));
}

// Scalar results keep a 64-bit copy so losses composed from reductions do
// not lose their low bits.
Tensor keep_precise(Tensor out, double v) {
    out.impl()->precise = v;
    return out;
}

bool scalar_pair(const Tensor& a, const Tensor& b) { return a.numel() == 1 && b.numel() == 1; }

// Output positions o in [lo, hi) whose input o*stride + k - pad lies in [0, n).
struct Span {
    std::size_t lo, hi;
};
Span valid_range(std::size_t out, std::size_t n, std::size_t k, std::size_t pad, std::size_t stride) {
    std::size_t lo = 0;
    while (lo < out && lo * stride + k < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out && hi * stride + k < pad + n) ++hi;
    return {lo, hi};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    const bool scalar = scalar_pair(a, b);
    const double pa = scalar ? a.precise_item() : 0.0, pb = scalar ? b.precise_item() : 0.0;
    Tensor r = make_result("add", a.shape(), std::move(out), {a, b}, [](std::span<const float> g, std::span<const Tensor> in) {
        for (int k = 0; k < 2; ++k)
            if (float* d = grad_buffer(in[k]))
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
    return scalar ? keep_precise(r, pa + pb) : r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    const bool scalar = scalar_pair(a, b);
    const double pa = scalar ? a.precise_item() : 0.0, pb = scalar ? b.precise_item() : 0.0;
    Tensor r = make_result("sub", a.shape(), std::move(out), {a, b}, [](std::span<const float> g, std::span<const Tensor> in) {
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        if (float* d = grad_buffer(in[1]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    });
    return scalar ? keep_precise(r, pa - pb) : r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    const bool scalar = scalar_pair(a, b);
    const double pa = scalar ? a.precise_item() : 0.0, pb = scalar ? b.precise_item() : 0.0;
    Tensor r = make_result("mul", a.shape(), std::move(out), {a, b}, [](std::span<const float> g, std::span<const Tensor> in) {
        const float* av = in[0].data();
        const float* bv = in[1].data();
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
        if (float* d = grad_buffer(in[1]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    });
    return scalar ? keep_precise(r, pa * pb) : r;
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same(a, b, "div");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    const bool scalar = scalar_pair(a, b);
    const double pa = scalar ? a.precise_item() : 0.0, pb = scalar ? b.precise_item() : 0.0;
    Tensor r = make_result("div", a.shape(), std::move(out), {a, b}, [](std::span<const float> g, std::span<const Tensor> in) {
        const float* av = in[0].data();
        const float* bv = in[1].data();
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / bv[i];
        if (float* d = grad_buffer(in[1]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    });
    return scalar ? keep_precise(r, pa / pb) : r;
}

Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    Tensor r = make_result("scale", a.shape(), std::move(out), {a}, [s](std::span<const float> g, std::span<const Tensor> in) {
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    });
    return a.numel() == 1 ? keep_precise(r, a.precise_item() * s) : r;
}

Tensor add_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    Tensor r = make_result("add_scalar", a.shape(), std::move(out), {a}, [](std::span<const float> g, std::span<const Tensor> in) {
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
    return a.numel() == 1 ? keep_precise(r, a.precise_item() + s) : r;
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
        throw ShapeMismatch("add_broadcast: " + to_string(bs) + " is not a suffix of " + to_string(as));
    const std::size_t inner = b.numel();
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i % inner];
    return make_result("add_broadcast", as, std::move(out), {a, b},
                       [inner](std::span<const float> g, std::span<const Tensor> in) {
                           if (float* d = grad_buffer(in[0]))
                               for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                           if (float* d = grad_buffer(in[1])) {
                               std::vector<double> acc(inner, 0.0);
                               for (std::size_t i = 0; i < g.size(); ++i) acc[i % inner] += g[i];
                               for (std::size_t i = 0; i < inner; ++i) d[i] += static_cast<float>(acc[i]);
                           }
                       });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    return make_result("relu", x.shape(), std::move(out), {x}, [](std::span<const float> g, std::span<const Tensor> in) {
        const float* xv = in[0].data();
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > 0.0f) d[i] += g[i];
    });
}

Tensor gelu(const Tensor& x) {
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
    }
    return make_result("gelu", x.shape(), std::move(out), {x}, [](std::span<const float> g, std::span<const Tensor> in) {
        const float* xv = in[0].data();
        float* d = grad_buffer(in[0]);
        if (!d) return;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv[i];
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            d[i] += static_cast<float>(g[i] * (cdf + v * pdf));
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_rank(weight, 2, "linear(weight)");
    const std::size_t out_f = weight.dim(0);
    const std::size_t in_f = weight.dim(1);
    if (x.rank() < 1 || x.dim(-1) != in_f)
        throw ShapeMismatch("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f))
        throw ShapeMismatch("linear: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
    const std::size_t rows = x.numel() / in_f;
    Shape shape = x.shape();
    shape.back() = out_f;
    std::vector<float> out(rows * out_f);
    const float* xv = x.data();
    const float* wv = weight.data();
    parallel_for(rows, [&](std::size_t r) {
        const float* xr = xv + r * in_f;
        for (std::size_t o = 0; o < out_f; ++o) {
            const float* wr = wv + o * in_f;
            double acc = bias.defined() ? bias.data()[o] : 0.0;
            for (std::size_t i = 0; i < in_f; ++i) acc += static_cast<double>(xr[i]) * wr[i];
            out[r * out_f + o] = static_cast<float>(acc);
        }
    });
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result("linear", std::move(shape), std::move(out), std::move(inputs),
                       [rows, in_f, out_f](std::span<const float> g, std::span<const Tensor> in) {
                           const float* xv = in[0].data();
                           const float* wv = in[1].data();
                           if (float* dx = grad_buffer(in[0])) {
                               parallel_for(rows, [&](std::size_t r) {
                                   for (std::size_t i = 0; i < in_f; ++i) {
                                       double acc = 0.0;
                                       for (std::size_t o = 0; o < out_f; ++o)
                                           acc += static_cast<double>(g[r * out_f + o]) * wv[o * in_f + i];
                                       dx[r * in_f + i] += static_cast<float>(acc);
                                   }
                               });
                           }
                           if (float* dw = grad_buffer(in[1])) {
                               parallel_for(out_f, [&](std::size_t o) {
                                   std::vector<double> acc(in_f, 0.0);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double go = g[r * out_f + o];
                                       if (go == 0.0) continue;
                                       const float* xr = xv + r * in_f;
                                       for (std::size_t i = 0; i < in_f; ++i) acc[i] += go * xr[i];
                                   }
                                   for (std::size_t i = 0; i < in_f; ++i) dw[o * in_f + i] += static_cast<float>(acc[i]);
                               });
                           }
                           if (in.size() > 2)
                               if (float* db = grad_buffer(in[2]))
                                   for (std::size_t o = 0; o < out_f; ++o) {
                                       double acc = 0.0;
                                       for (std::size_t r = 0; r < rows; ++r) acc += g[r * out_f + o];
                                       db[o] += static_cast<float>(acc);
                                   }
                       });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() < 2 || a.rank() != b.rank())
        throw ShapeMismatch("matmul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t m = a.dim(-2);
    const std::size_t k = a.dim(-1);
    const std::size_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
    const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
    if (k != kb || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
        throw ShapeMismatch("matmul: " + to_string(a.shape()) + " vs " + to_string(b.shape()) +
                            (transpose_b ? " (transposed)" : ""));
    const std::size_t batch = a.numel() / (m * k);
    // b element (kk, j) of batch t
    auto b_at = [=](const float* bv, std::size_t t, std::size_t kk, std::size_t j) {
        return transpose_b ? bv[t * n * k + j * k + kk] : bv[t * k * n + kk * n + j];
    };
    Shape shape = a.shape();
    shape.back() = n;
    std::vector<float> out(batch * m * n);
    const float* av = a.data();
    const float* bv = b.data();
    parallel_for(batch, [&](std::size_t t) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += static_cast<double>(av[t * m * k + i * k + kk]) * b_at(bv, t, kk, j);
                out[t * m * n + i * n + j] = static_cast<float>(acc);
            }
    });
    return make_result("matmul", std::move(shape), std::move(out), {a, b},
                       [=](std::span<const float> g, std::span<const Tensor> in) {
                           const float* av = in[0].data();
                           const float* bv = in[1].data();
                           if (float* da = grad_buffer(in[0])) {
                               parallel_for(batch, [&](std::size_t t) {
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t kk = 0; kk < k; ++kk) {
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < n; ++j)
                                               acc += static_cast<double>(g[t * m * n + i * n + j]) * b_at(bv, t, kk, j);
                                           da[t * m * k + i * k + kk] += static_cast<float>(acc);
                                       }
                               });
                           }
                           if (float* db = grad_buffer(in[1])) {
                               parallel_for(batch, [&](std::size_t t) {
                                   for (std::size_t kk = 0; kk < k; ++kk)
                                       for (std::size_t j = 0; j < n; ++j) {
                                           double acc = 0.0;
                                           for (std::size_t i = 0; i < m; ++i)
                                               acc += static_cast<double>(av[t * m * k + i * k + kk]) * g[t * m * n + i * n + j];
                                           const std::size_t idx = transpose_b ? t * n * k + j * k + kk : t * k * n + kk * n + j;
                                           db[idx] += static_cast<float>(acc);
                                       }
                               });
                           }
                       });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
    require_rank(x, 4, "conv2d(input)");
    require_rank(weight, 4, "conv2d(weight)");
    if (stride < 1) throw ShapeMismatch("conv2d: stride must be >= 1");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
    if (weight.dim(1) != C)
        throw ShapeMismatch("conv2d: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
        throw ShapeMismatch("conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
    if (H + 2 * pad < KH || W + 2 * pad < KW)
        throw ShapeMismatch("conv2d: kernel larger than padded input " + to_string(x.shape()));
    const std::size_t OH = (H + 2 * pad - KH) / stride + 1;
    const std::size_t OW = (W + 2 * pad - KW) / stride + 1;

    std::vector<float> out(B * O * OH * OW);
    const float* xv = x.data();
    const float* wv = weight.data();
    parallel_for(B * O, [&](std::size_t bo) {
        const std::size_t b = bo / O, o = bo % O;
        std::vector<double> acc(OH * OW, bias.defined() ? bias.data()[o] : 0.0);
        for (std::size_t c = 0; c < C; ++c) {
            const float* plane = xv + (b * C + c) * H * W;
            for (std::size_t ky = 0; ky < KH; ++ky) {
                const Span ry = valid_range(OH, H, ky, pad, stride);
                for (std::size_t kx = 0; kx < KW; ++kx) {
                    const Span rx = valid_range(OW, W, kx, pad, stride);
                    const double w = wv[((o * C + c) * KH + ky) * KW + kx];
                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                        const float* row = plane + (oy * stride + ky - pad) * W + kx - pad;
                        double* arow = acc.data() + oy * OW;
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) arow[ox] += w * row[ox * stride];
                    }
                }
            }
        }
        float* dst = out.data() + bo * OH * OW;
        for (std::size_t i = 0; i < OH * OW; ++i) dst[i] = static_cast<float>(acc[i]);
    });

    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(
        "conv2d", {B, O, OH, OW}, std::move(out), std::move(inputs),
        [=](std::span<const float> g, std::span<const Tensor> in) {
            const float* xv = in[0].data();
            const float* wv = in[1].data();
            if (float* dx = grad_buffer(in[0])) {
                parallel_for(B * C, [&](std::size_t bc) {
                    const std::size_t b = bc / C, c = bc % C;
                    std::vector<double> acc(H * W, 0.0);
                    for (std::size_t o = 0; o < O; ++o) {
                        const float* gp = g.data() + (b * O + o) * OH * OW;
                        for (std::size_t ky = 0; ky < KH; ++ky) {
                            const Span ry = valid_range(OH, H, ky, pad, stride);
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const Span rx = valid_range(OW, W, kx, pad, stride);
                                const double w = wv[((o * C + c) * KH + ky) * KW + kx];
                                for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                    double* arow = acc.data() + (oy * stride + ky - pad) * W + kx - pad;
                                    const float* grow = gp + oy * OW;
                                    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) arow[ox * stride] += w * grow[ox];
                                }
                            }
                        }
                    }
                    float* dst = dx + bc * H * W;
                    for (std::size_t i = 0; i < H * W; ++i) dst[i] += static_cast<float>(acc[i]);
                });
            }
            if (float* dw = grad_buffer(in[1])) {
                parallel_for(O, [&](std::size_t o) {
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky) {
                            const Span ry = valid_range(OH, H, ky, pad, stride);
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const Span rx = valid_range(OW, W, kx, pad, stride);
                                double acc = 0.0;
                                for (std::size_t b = 0; b < B; ++b) {
                                    const float* plane = xv + (b * C + c) * H * W;
                                    const float* gp = g.data() + (b * O + o) * OH * OW;
                                    for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                        const float* row = plane + (oy * stride + ky - pad) * W + kx - pad;
                                        const float* grow = gp + oy * OW;
                                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                                            acc += static_cast<double>(grow[ox]) * row[ox * stride];
                                    }
                                }
                                dw[((o * C + c) * KH + ky) * KW + kx] += static_cast<float>(acc);
                            }
                        }
                });
            }
            if (in.size() > 2)
                if (float* db = grad_buffer(in[2]))
                    for (std::size_t o = 0; o < O; ++o) {
                        double acc = 0.0;
                        for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t i = 0; i < OH * OW; ++i) acc += g[(b * O + o) * OH * OW + i];
                        db[o] += static_cast<float>(acc);
                    }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const std::size_t C = x.dim(-1);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeMismatch("layer_norm: input " + to_string(x.shape()) + " vs gamma " + to_string(gamma.shape()));
    const std::size_t rows = x.numel() / C;
    std::vector<float> out(x.numel());
    std::vector<float> xhat(x.numel());
    std::vector<float> inv_std(rows);
    const float* xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xv + r * C;
        double mu = 0.0;
        for (std::size_t i = 0; i < C; ++i) mu += xr[i];
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t i = 0; i < C; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(C);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<float>(is);
        for (std::size_t i = 0; i < C; ++i) {
            const double h = (xr[i] - mu) * is;
            xhat[r * C + i] = static_cast<float>(h);
            out[r * C + i] = static_cast<float>(gamma.data()[i] * h + beta.data()[i]);
        }
    }
    return make_result(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [rows, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const float> g,
                                                                          std::span<const Tensor> in) {
            const float* gam = in[1].data();
            if (float* dx = grad_buffer(in[0])) {
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < C; ++i) {
                        const double dh = static_cast<double>(g[r * C + i]) * gam[i];
                        m1 += dh;
                        m2 += dh * xhat[r * C + i];
                    }
                    m1 /= static_cast<double>(C);
                    m2 /= static_cast<double>(C);
                    for (std::size_t i = 0; i < C; ++i) {
                        const double dh = static_cast<double>(g[r * C + i]) * gam[i];
                        dx[r * C + i] += static_cast<float>(inv_std[r] * (dh - m1 - xhat[r * C + i] * m2));
                    }
                }
            }
            float* dg = grad_buffer(in[1]);
            float* dbeta = grad_buffer(in[2]);
            if (dg || dbeta) {
                std::vector<double> ag(C, 0.0), ab(C, 0.0);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < C; ++i) {
                        ag[i] += static_cast<double>(g[r * C + i]) * xhat[r * C + i];
                        ab[i] += g[r * C + i];
                    }
                for (std::size_t i = 0; i < C; ++i) {
                    if (dg) dg[i] += static_cast<float>(ag[i]);
                    if (dbeta) dbeta[i] += static_cast<float>(ab[i]);
                }
            }
        });
}

Tensor softmax(const Tensor& x) {
    const std::size_t C = x.dim(-1);
    const std::size_t rows = x.numel() / C;
    std::vector<float> out(x.numel());
    const float* xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = xv + r * C;
        const float mx = *std::max_element(xr, xr + C);
        double z = 0.0;
        for (std::size_t i = 0; i < C; ++i) z += std::exp(static_cast<double>(xr[i]) - mx);
        for (std::size_t i = 0; i < C; ++i) out[r * C + i] = static_cast<float>(std::exp(static_cast<double>(xr[i]) - mx) / z);
    }
    std::vector<float> saved = out;
    return make_result("softmax", x.shape(), std::move(out), {x},
                       [rows, C, y = std::move(saved)](std::span<const float> g, std::span<const Tensor> in) {
                           float* dx = grad_buffer(in[0]);
                           if (!dx) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t i = 0; i < C; ++i) dot += static_cast<double>(g[r * C + i]) * y[r * C + i];
                               for (std::size_t i = 0; i < C; ++i)
                                   dx[r * C + i] += static_cast<float>(y[r * C + i] * (g[r * C + i] - dot));
                           }
                       });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeMismatch("concat axis out of range for " + to_string(s0));
    Shape shape = s0;
    shape[axis] = 0;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        if (ps.size() != s0.size()) throw ShapeMismatch("concat: " + to_string(ps) + " vs " + to_string(s0));
        for (std::size_t d = 0; d < ps.size(); ++d)
            if (d != axis && ps[d] != s0[d]) throw ShapeMismatch("concat: " + to_string(ps) + " vs " + to_string(s0));
        shape[axis] += ps[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    const std::size_t total = shape[axis];
    std::vector<float> out(numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.dim(static_cast<int>(axis));
        offsets.push_back(off);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data() + o * len * inner, len * inner, out.data() + (o * total + off) * inner);
        off += len;
    }
    return make_result("concat", std::move(shape), std::move(out), parts,
                       [outer, inner, total, offsets](std::span<const float> g, std::span<const Tensor> in) {
                           for (std::size_t k = 0; k < in.size(); ++k) {
                               float* d = grad_buffer(in[k]);
                               if (!d) continue;
                               const std::size_t len = in[k].numel() / (outer * inner);
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < len * inner; ++i)
                                       d[o * len * inner + i] += g[(o * total + offsets[k]) * inner + i];
                           }
                       });
}

Tensor gather(const Tensor& x, Shape shape, std::vector<std::uint32_t> index, const char* kernel) {
    if (numel(shape) != index.size()) throw ShapeMismatch(std::string(kernel) + ": index/shape size mismatch");
    std::vector<float> out(index.size());
    const float* xv = x.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n) throw ShapeMismatch(std::string(kernel) + ": index out of range");
        out[i] = xv[index[i]];
    }
    return make_result(kernel, std::move(shape), std::move(out), {x},
                       [index = std::move(index)](std::span<const float> g, std::span<const Tensor> in) {
                           float* d = grad_buffer(in[0]);
                           if (!d) return;
                           for (std::size_t i = 0; i < g.size(); ++i) d[index[i]] += g[i];
                       });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = x.shape();
    if (axis >= s.size() || start + length > s[axis])
        throw ShapeMismatch("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                            std::to_string(axis) + " of " + to_string(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape shape = s;
    shape[axis] = length;
    std::vector<std::uint32_t> idx;
    idx.reserve(outer * length * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < length; ++l)
            for (std::size_t i = 0; i < inner; ++i)
                idx.push_back(static_cast<std::uint32_t>((o * s[axis] + start + l) * inner + i));
    return gather(x, std::move(shape), std::move(idx), "slice");
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw ShapeMismatch("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
    std::vector<float> out(x.values().begin(), x.values().end());
    return make_result("reshape", std::move(shape), std::move(out), {x}, [](std::span<const float> g, std::span<const Tensor> in) {
        if (float* d = grad_buffer(in[0]))
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const Shape& s = x.shape();
    if (order.size() != s.size()) throw ShapeMismatch("permute order rank differs from " + to_string(s));
    std::vector<bool> used(s.size(), false);
    for (auto o : order) {
        if (o >= s.size() || used[o]) throw ShapeMismatch("permute order is not a permutation");
        used[o] = true;
    }
    const std::size_t r = s.size();
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * s[d];
    Shape shape(r);
    for (std::size_t d = 0; d < r; ++d) shape[d] = s[order[d]];
    std::vector<std::uint32_t> idx(x.numel());
    std::vector<std::size_t> pos(r, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < r; ++d) src += pos[d] * in_stride[order[d]];
        idx[i] = static_cast<std::uint32_t>(src);
        for (std::size_t d = r; d-- > 0;) {
            if (++pos[d] < shape[d]) break;
            pos[d] = 0;
        }
    }
    return gather(x, std::move(shape), std::move(idx), "permute");
}

Tensor upsample_nearest2x(const Tensor& x) {
    require_rank(x, 4, "upsample_nearest2x");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<std::uint32_t> idx;
    idx.reserve(B * C * 4 * H * W);
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx)
                idx.push_back(static_cast<std::uint32_t>(bc * H * W + (y / 2) * W + xx / 2));
    return gather(x, {B, C, 2 * H, 2 * W}, std::move(idx), "upsample_nearest2x");
}

namespace {

/// Flat [B,H,W,C] source index for each element of the partitioned
/// [B*nW, ws*ws, C] layout.
std::vector<std::uint32_t> window_index(std::size_t B, std::size_t H, std::size_t W, std::size_t C, std::size_t ws,
                                        std::size_t shift) {
    const std::size_t nh = H / ws, nw = W / ws;
    std::vector<std::uint32_t> idx;
    idx.reserve(B * H * W * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t wy = 0; wy < nh; ++wy)
            for (std::size_t wx = 0; wx < nw; ++wx)
                for (std::size_t ty = 0; ty < ws; ++ty)
                    for (std::size_t tx = 0; tx < ws; ++tx) {
                        const std::size_t y = (wy * ws + ty + shift) % H;
                        const std::size_t x = (wx * ws + tx + shift) % W;
                        for (std::size_t c = 0; c < C; ++c)
                            idx.push_back(static_cast<std::uint32_t>(((b * H + y) * W + x) * C + c));
                    }
    return idx;
}

}  // namespace

Tensor window_partition(const Tensor& x, std::size_t window, std::size_t shift) {
    require_rank(x, 4, "window_partition");
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (window == 0 || H % window || W % window)
        throw ShapeMismatch("window_partition: grid " + to_string(x.shape()) + " not divisible by window " +
                            std::to_string(window));
    if (shift >= window) throw ShapeMismatch("window_partition: shift must be smaller than the window");
    const std::size_t nwin = (H / window) * (W / window);
    return gather(x, {B * nwin, window * window, C}, window_index(B, H, W, C, window, shift), "window_partition");
}

Tensor window_reverse(const Tensor& windows, std::size_t batch, std::size_t height, std::size_t width,
                      std::size_t window, std::size_t shift) {
    require_rank(windows, 3, "window_reverse");
    if (window == 0 || height % window || width % window || shift >= window)
        throw ShapeMismatch("window_reverse: bad window layout");
    const std::size_t C = windows.dim(2);
    const std::size_t nwin = (height / window) * (width / window);
    if (windows.dim(0) != batch * nwin || windows.dim(1) != window * window)
        throw ShapeMismatch("window_reverse: " + to_string(windows.shape()) + " does not tile a " +
                            std::to_string(height) + "x" + std::to_string(width) + " grid");
    const auto fwd = window_index(batch, height, width, C, window, shift);
    std::vector<std::uint32_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = static_cast<std::uint32_t>(i);
    return gather(windows, {batch, height, width, C}, std::move(inv), "window_reverse");
}

Tensor patchify(const Tensor& x, std::size_t patch) {
    require_rank(x, 4, "patchify");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (patch == 0 || H % patch || W % patch)
        throw ShapeMismatch("patchify: " + to_string(x.shape()) + " not divisible by patch " + std::to_string(patch));
    const std::size_t h = H / patch, w = W / patch;
    std::vector<std::uint32_t> idx;
    idx.reserve(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t py = 0; py < h; ++py)
            for (std::size_t px = 0; px < w; ++px)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t dy = 0; dy < patch; ++dy)
                        for (std::size_t dx = 0; dx < patch; ++dx)
                            idx.push_back(static_cast<std::uint32_t>(((b * C + c) * H + py * patch + dy) * W +
                                                                     px * patch + dx));
    return gather(x, {B, h, w, C * patch * patch}, std::move(idx), "patchify");
}

Tensor unpatchify(const Tensor& x, std::size_t patch, std::size_t channels) {
    require_rank(x, 4, "unpatchify");
    const std::size_t B = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (x.dim(3) != channels * patch * patch)
        throw ShapeMismatch("unpatchify: last dim of " + to_string(x.shape()) + " is not channels*patch^2");
    const std::size_t H = h * patch, W = w * patch;
    std::vector<std::uint32_t> idx;
    idx.reserve(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    const std::size_t py = y / patch, px = xx / patch;
                    const std::size_t k = (c * patch + y % patch) * patch + xx % patch;
                    idx.push_back(static_cast<std::uint32_t>(((b * h + py) * w + px) * x.dim(3) + k));
                }
    return gather(x, {B, channels, H, W}, std::move(idx), "unpatchify");
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    return keep_precise(
        make_result("sum", {}, {static_cast<float>(acc)}, {x}, [](std::span<const float> g, std::span<const Tensor> in) {
            if (float* d = grad_buffer(in[0]))
                for (std::size_t i = 0; i < in[0].numel(); ++i) d[i] += g[0];
        }),
        acc);
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    const double n = static_cast<double>(x.numel());
    return keep_precise(make_result("mean", {}, {static_cast<float>(acc / n)}, {x},
                                    [n](std::span<const float> g, std::span<const Tensor> in) {
                                        if (float* d = grad_buffer(in[0])) {
                                            const float s = static_cast<float>(g[0] / n);
                                            for (std::size_t i = 0; i < in[0].numel(); ++i) d[i] += s;
                                        }
                                    }),
                        acc / n);
}

Tensor radon(const Tensor& x, const ProjectionGeometry& geom) {
    require_rank(x, 4, "radon");
    if (x.dim(1) != 1 || x.dim(2) != x.dim(3))
        throw ShapeMismatch("radon expects [B, 1, S, S], got " + to_string(x.shape()));
    const std::size_t B = x.dim(0), S = x.dim(2);
    const std::size_t V = geom.num_views, D = geom.num_detectors;
    std::vector<float> out(B * V * D);
    for (std::size_t b = 0; b < B; ++b) {
        Image img(S, S);
        std::copy_n(x.data() + b * S * S, S * S, img.values.begin());
        const Sinogram s = forward_project(img, geom);
        std::copy(s.values.begin(), s.values.end(), out.begin() + static_cast<long>(b * V * D));
    }
    return make_result("radon", {B, 1, V, D}, std::move(out), {x},
                       [geom, B, S, V, D](std::span<const float> g, std::span<const Tensor> in) {
                           float* d = grad_buffer(in[0]);
                           if (!d) return;
                           for (std::size_t b = 0; b < B; ++b) {
                               Sinogram s(geom);
                               std::copy_n(g.data() + b * V * D, V * D, s.values.begin());
                               const Image bp = back_project(s, S);
                               for (std::size_t i = 0; i < S * S; ++i) d[b * S * S + i] += bp.values[i];
                           }
                       });
}

}  // namespace nictkit::ad
