// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <limits>
#include <string>

#include "naslora/tensor.hpp"

namespace naslora {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline std::size_t trailing(const Shape& s, std::size_t from) {
    std::size_t n = 1;
    for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
    return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
        if (a.requires_grad()) {
            auto ga = a.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
        if (a.requires_grad()) {
            auto ga = a.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto gb = b.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
        if (a.requires_grad()) {
            auto ga = a.impl()->grad_buffer();
            const auto y = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (b.requires_grad()) {
            auto gb = b.impl()->grad_buffer();
            const auto x = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= s;
    return detail::make_result(a.shape(), std::move(out), {&a}, [a, s](std::span<const double> g) {
        auto ga = a.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += s;
    return detail::make_result(a.shape(), std::move(out), {&a}, [a](std::span<const double> g) {
        auto ga = a.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

/// x[B, ...] + y[...], y broadcast over the leading batch extent.
inline Tensor add_batch_broadcast(const Tensor& x, const Tensor& y) {
    detail::require(x.rank() == y.rank() + 1, "add_batch_broadcast: rank mismatch " + shape_str(x.shape()) +
                                                  " vs " + shape_str(y.shape()));
    for (std::size_t d = 0; d < y.rank(); ++d) {
        detail::require(x.dim(d + 1) == y.dim(d), "add_batch_broadcast: dimension " + std::to_string(d + 1) +
                                                      " mismatch");
    }
    const std::size_t inner = y.numel();
    const std::size_t batch = x.dim(0);
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto yv = y.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] += yv[i];
    }
    return detail::make_result(x.shape(), std::move(out), {&x, &y}, [x, y, inner, batch](std::span<const double> g) {
        if (x.requires_grad()) {
            auto gx = x.impl()->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (y.requires_grad()) {
            auto gy = y.impl()->grad_buffer();
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t i = 0; i < inner; ++i) gy[i] += g[b * inner + i];
            }
        }
    });
}

/// x[B, C, ...] + bias[C].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    detail::require(x.rank() >= 2, "add_channel_bias: input needs rank >= 2");
    detail::require(bias.rank() == 1 && bias.dim(0) == x.dim(1),
                    "add_channel_bias: bias extent 0 must equal channel extent 1 (" + std::to_string(x.dim(1)) + ")");
    const std::size_t batch = x.dim(0), channels = x.dim(1), inner = detail::trailing(x.shape(), 2);
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto bv = bias.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            double* row = out.data() + (b * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) row[i] += bv[c];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {&x, &bias}, [x, bias, batch, channels, inner](std::span<const double> g) {
            if (x.requires_grad()) {
                auto gx = x.impl()->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto gb = bias.impl()->grad_buffer();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        const double* row = g.data() + (b * channels + c) * inner;
                        double s = 0.0;
                        for (std::size_t i = 0; i < inner; ++i) s += row[i];
                        gb[c] += s;
                    }
                }
            }
        });
}

inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * v[i] * (1.0 + std::erf(v[i] * inv_sqrt2));
    return detail::make_result(x.shape(), std::move(out), {&x}, [x](std::span<const double> g) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        auto gx = x.impl()->grad_buffer();
        const auto v = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(v[i] * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v[i] * v[i]);
            gx[i] += g[i] * (cdf + v[i] * pdf);
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = v[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-v[i])) : std::exp(v[i]) / (1.0 + std::exp(v[i]));
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return detail::make_result(x.shape(), std::move(out), {&x}, [x, y](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        const double* yv = y->data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return detail::make_result(std::move(shape), std::move(out), {&x}, [x](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// x[...] -> [B, ...] by repetition.
inline Tensor expand_batch(const Tensor& x, std::size_t batch) {
    Shape shape{batch};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    const std::size_t inner = x.numel();
    std::vector<double> out(batch * inner);
    for (std::size_t b = 0; b < batch; ++b) std::copy(x.data().begin(), x.data().end(), out.begin() + b * inner);
    return detail::make_result(std::move(shape), std::move(out), {&x}, [x, batch, inner](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < inner; ++i) gx[i] += g[b * inner + i];
        }
    });
}

/// Rows of the leading extent, in the given order.
inline Tensor select_rows(const Tensor& x, std::vector<std::size_t> rows) {
    const std::size_t inner = detail::trailing(x.shape(), 1);
    for (std::size_t r : rows) {
        detail::require(r < x.dim(0), "select_rows: row " + std::to_string(r) + " out of range for extent 0 = " +
                                          std::to_string(x.dim(0)));
    }
    detail::require(!rows.empty(), "select_rows: empty selection");
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<double> out(rows.size() * inner);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        std::copy_n(x.data().begin() + rows[k] * inner, inner, out.begin() + k * inner);
    }
    return detail::make_result(std::move(shape), std::move(out), {&x},
                               [x, rows = std::move(rows), inner](std::span<const double> g) {
                                   auto gx = x.impl()->grad_buffer();
                                   for (std::size_t k = 0; k < rows.size(); ++k) {
                                       for (std::size_t i = 0; i < inner; ++i) {
                                           gx[rows[k] * inner + i] += g[k * inner + i];
                                       }
                                   }
                               });
}

/// x[B, C, ...] -> x[B, idx, ...].
inline Tensor select_channels(const Tensor& x, std::vector<std::size_t> idx) {
    detail::require(x.rank() >= 2, "select_channels: input needs rank >= 2");
    detail::require(!idx.empty(), "select_channels: empty selection");
    const std::size_t batch = x.dim(0), channels = x.dim(1), inner = detail::trailing(x.shape(), 2);
    for (std::size_t c : idx) {
        detail::require(c < channels, "select_channels: channel " + std::to_string(c) + " out of range for extent 1");
    }
    Shape shape = x.shape();
    shape[1] = idx.size();
    std::vector<double> out(batch * idx.size() * inner);
    const auto v = x.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < idx.size(); ++k) {
            std::copy_n(v.begin() + (b * channels + idx[k]) * inner, inner,
                        out.begin() + (b * idx.size() + k) * inner);
        }
    }
    return detail::make_result(std::move(shape), std::move(out), {&x},
                               [x, idx = std::move(idx), batch, channels, inner](std::span<const double> g) {
                                   auto gx = x.impl()->grad_buffer();
                                   for (std::size_t b = 0; b < batch; ++b) {
                                       for (std::size_t k = 0; k < idx.size(); ++k) {
                                           const double* src = g.data() + (b * idx.size() + k) * inner;
                                           double* dst = gx.data() + (b * channels + idx[k]) * inner;
                                           for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                                       }
                                   }
                               });
}

/// Copy of `base` whose channels idx[k] are replaced by channel k of `replacement`.
inline Tensor merge_channels(const Tensor& base, const Tensor& replacement, std::vector<std::size_t> idx) {
    detail::require(base.rank() >= 2 && replacement.rank() == base.rank(), "merge_channels: rank mismatch");
    detail::require(replacement.dim(1) == idx.size(), "merge_channels: replacement extent 1 must equal index count");
    for (std::size_t d = 0; d < base.rank(); ++d) {
        if (d == 1) continue;
        detail::require(base.dim(d) == replacement.dim(d),
                        "merge_channels: dimension " + std::to_string(d) + " mismatch");
    }
    const std::size_t batch = base.dim(0), channels = base.dim(1), inner = detail::trailing(base.shape(), 2);
    std::vector<bool> replaced(channels, false);
    for (std::size_t c : idx) {
        detail::require(c < channels, "merge_channels: channel " + std::to_string(c) + " out of range");
        replaced[c] = true;
    }
    std::vector<double> out(base.data().begin(), base.data().end());
    const auto rv = replacement.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < idx.size(); ++k) {
            std::copy_n(rv.begin() + (b * idx.size() + k) * inner, inner, out.begin() + (b * channels + idx[k]) * inner);
        }
    }
    return detail::make_result(
        base.shape(), std::move(out), {&base, &replacement},
        [base, replacement, idx = std::move(idx), replaced = std::move(replaced), batch, channels,
         inner](std::span<const double> g) {
            if (base.requires_grad()) {
                auto gb = base.impl()->grad_buffer();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        if (replaced[c]) continue;
                        const std::size_t off = (b * channels + c) * inner;
                        for (std::size_t i = 0; i < inner; ++i) gb[off + i] += g[off + i];
                    }
                }
            }
            if (replacement.requires_grad()) {
                auto gr = replacement.impl()->grad_buffer();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t k = 0; k < idx.size(); ++k) {
                        const double* src = g.data() + (b * channels + idx[k]) * inner;
                        double* dst = gr.data() + (b * idx.size() + k) * inner;
                        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
                }
            }
        });
}

/// [B, C, H, W] -> [B, C*block*block, H/block, W/block]; channel order is (c, dy, dx).
inline Tensor space_to_depth(const Tensor& x, std::size_t block) {
    detail::require(x.rank() == 4, "space_to_depth: expected rank 4");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(block >= 1 && H % block == 0, "space_to_depth: extent 2 not divisible by block");
    detail::require(W % block == 0, "space_to_depth: extent 3 not divisible by block");
    const std::size_t Ho = H / block, Wo = W / block, Co = C * block * block;
    std::vector<std::size_t> map(x.numel());  // output index -> input index
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t dy = 0; dy < block; ++dy)
                for (std::size_t dx = 0; dx < block; ++dx)
                    for (std::size_t oy = 0; oy < Ho; ++oy)
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const std::size_t oc = (c * block + dy) * block + dx;
                            const std::size_t o = ((b * Co + oc) * Ho + oy) * Wo + ox;
                            map[o] = ((b * C + c) * H + oy * block + dy) * W + ox * block + dx;
                        }
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = v[map[o]];
    return detail::make_result({B, Co, Ho, Wo}, std::move(out), {&x}, [x, map = std::move(map)](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        for (std::size_t o = 0; o < g.size(); ++o) gx[map[o]] += g[o];
    });
}

/// Inverse of space_to_depth: [B, C*block*block, H, W] -> [B, C, H*block, W*block].
inline Tensor depth_to_space(const Tensor& x, std::size_t block) {
    detail::require(x.rank() == 4, "depth_to_space: expected rank 4");
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(block >= 1 && Ci % (block * block) == 0, "depth_to_space: extent 1 not divisible by block^2");
    const std::size_t C = Ci / (block * block), Ho = H * block, Wo = W * block;
    std::vector<std::size_t> map(x.numel());  // output index -> input index
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    const std::size_t ic = (c * block + oy % block) * block + ox % block;
                    map[((b * C + c) * Ho + oy) * Wo + ox] = ((b * Ci + ic) * H + oy / block) * W + ox / block;
                }
    std::vector<double> out(x.numel());
    const auto v = x.data();
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = v[map[o]];
    return detail::make_result({B, C, Ho, Wo}, std::move(out), {&x}, [x, map = std::move(map)](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        for (std::size_t o = 0; o < g.size(); ++o) gx[map[o]] += g[o];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result({1}, {s}, {&x}, [x](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        for (double& v : gx) v += g[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

/// out[b, o, p] = sum_i weight[o, i] * input[b, i, p]: a 1x1 channel map over any trailing grid.
inline Tensor project_channels(const Tensor& input, const Tensor& weight) {
    detail::require(input.rank() >= 2, "project_channels: input needs rank >= 2");
    detail::require(weight.rank() == 2, "project_channels: weight must be rank 2");
    if (weight.dim(1) != input.dim(1)) {
        throw ShapeError("project_channels: weight extent 1 (" + std::to_string(weight.dim(1)) +
                         ") must equal input channel extent 1 (" + std::to_string(input.dim(1)) + ")");
    }
    const std::size_t B = input.dim(0), Ci = input.dim(1), Co = weight.dim(0), P = detail::trailing(input.shape(), 2);
    Shape shape = input.shape();
    shape[1] = Co;
    std::vector<double> out(B * Co * P, 0.0);
    const double* x = input.data().data();
    const double* w = weight.data().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t o = 0; o < Co; ++o) {
            double* dst = out.data() + (b * Co + o) * P;
            for (std::size_t i = 0; i < Ci; ++i) {
                const double wv = w[o * Ci + i];
                const double* src = x + (b * Ci + i) * P;
                for (std::size_t p = 0; p < P; ++p) dst[p] += wv * src[p];
            }
        }
    }
    return detail::make_result(
        std::move(shape), std::move(out), {&input, &weight}, [input, weight, B, Ci, Co, P](std::span<const double> g) {
            const double* x = input.data().data();
            const double* w = weight.data().data();
            if (input.requires_grad()) {
                auto gx = input.impl()->grad_buffer();
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t o = 0; o < Co; ++o) {
                        const double* src = g.data() + (b * Co + o) * P;
                        for (std::size_t i = 0; i < Ci; ++i) {
                            const double wv = w[o * Ci + i];
                            double* dst = gx.data() + (b * Ci + i) * P;
                            for (std::size_t p = 0; p < P; ++p) dst[p] += wv * src[p];
                        }
                    }
                }
            }
            if (weight.requires_grad()) {
                auto gw = weight.impl()->grad_buffer();
                for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t o = 0; o < Co; ++o) {
                        const double* go = g.data() + (b * Co + o) * P;
                        for (std::size_t i = 0; i < Ci; ++i) {
                            const double* xi = x + (b * Ci + i) * P;
                            double s = 0.0;
                            for (std::size_t p = 0; p < P; ++p) s += go[p] * xi[p];
                            gw[o * Ci + i] += s;
                        }
                    }
                }
            }
        });
}

/// y[..., o] = sum_i x[..., i] * weight[o, i] (+ bias[o]).
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
    detail::require(weight.rank() == 2, "linear: weight must be rank 2");
    const std::size_t in = weight.dim(1), outn = weight.dim(0);
    if (x.shape().back() != in) {
        throw ShapeError("linear: input last extent (" + std::to_string(x.shape().back()) +
                         ") must equal weight extent 1 (" + std::to_string(in) + ")");
    }
    if (bias.defined()) {
        detail::require(bias.rank() == 1 && bias.dim(0) == outn, "linear: bias extent 0 must equal weight extent 0");
    }
    const std::size_t rows = x.numel() / in;
    Shape shape = x.shape();
    shape.back() = outn;
    std::vector<double> out(rows * outn);
    const double* xv = x.data().data();
    const double* w = weight.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < outn; ++o) {
            double s = bias.defined() ? bias.data()[o] : 0.0;
            const double* xr = xv + r * in;
            const double* wr = w + o * in;
            for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
            out[r * outn + o] = s;
        }
    }
    return detail::make_result(
        std::move(shape), std::move(out), {&x, &weight, &bias},
        [x, weight, bias, rows, in, outn](std::span<const double> g) {
            const double* xv = x.data().data();
            const double* w = weight.data().data();
            if (x.requires_grad()) {
                auto gx = x.impl()->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t o = 0; o < outn; ++o) {
                        const double go = g[r * outn + o];
                        const double* wr = w + o * in;
                        for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += go * wr[i];
                    }
                }
            }
            if (weight.requires_grad()) {
                auto gw = weight.impl()->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t o = 0; o < outn; ++o) {
                        const double go = g[r * outn + o];
                        const double* xr = xv + r * in;
                        for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += go * xr[i];
                    }
                }
            }
            if (bias.defined() && bias.requires_grad()) {
                auto gb = bias.impl()->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t o = 0; o < outn; ++o) gb[o] += g[r * outn + o];
                }
            }
        });
}

/// Batched matrix product over the last two extents; leading extents must match.
/// Shapes: a[..., m, k] (or [..., k, m] when trans_a), b[..., k, n] (or [..., n, k] when trans_b).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
    detail::require(a.rank() >= 2 && a.rank() == b.rank(), "bmm: operands need equal rank >= 2");
    const std::size_t r = a.rank();
    for (std::size_t d = 0; d + 2 < r; ++d) {
        detail::require(a.dim(d) == b.dim(d), "bmm: batch dimension " + std::to_string(d) + " mismatch");
    }
    const std::size_t m = trans_a ? a.dim(r - 1) : a.dim(r - 2);
    const std::size_t k = trans_a ? a.dim(r - 2) : a.dim(r - 1);
    const std::size_t kb = trans_b ? b.dim(r - 1) : b.dim(r - 2);
    const std::size_t n = trans_b ? b.dim(r - 2) : b.dim(r - 1);
    if (k != kb) {
        throw ShapeError("bmm: contraction extents differ (" + std::to_string(k) + " vs " + std::to_string(kb) + ")");
    }
    const std::size_t batch = a.numel() / (m * k);
    Shape shape(a.shape().begin(), a.shape().end() - 2);
    shape.push_back(m);
    shape.push_back(n);

    // C[m,n] += A[m,k] B[k,n] with arbitrary transposition of the stored operands.
    auto gemm = [](const double* A, bool ta, const double* Bm, bool tb, double* C, std::size_t m, std::size_t k,
                   std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = ta ? A[p * m + i] : A[i * k + p];
                if (!tb) {
                    const double* brow = Bm + p * n;
                    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                } else if (ta) {
                    for (std::size_t j = 0; j < n; ++j) crow[j] += av * Bm[j * k + p];
                }
            }
            if (tb && !ta) {
                const double* arow = A + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double* brow = Bm + j * k;
                    double s = 0.0;
                    for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                    crow[j] += s;
                }
            }
        }
    };

    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
        gemm(a.data().data() + s * m * k, trans_a, b.data().data() + s * k * n, trans_b, out.data() + s * m * n, m, k, n);
    }
    return detail::make_result(
        std::move(shape), std::move(out), {&a, &b}, [a, b, trans_a, trans_b, batch, m, k, n, gemm](std::span<const double> g) {
            for (std::size_t s = 0; s < batch; ++s) {
                const double* G = g.data() + s * m * n;
                const double* A = a.data().data() + s * m * k;
                const double* Bm = b.data().data() + s * k * n;
                if (a.requires_grad()) {
                    double* GA = a.impl()->grad_buffer().data() + s * m * k;
                    if (!trans_a) {
                        // dA[m,k] = G[m,n] * B^T
                        gemm(G, false, Bm, !trans_b, GA, m, n, k);
                    } else {
                        // stored A is [k,m]: dA^T[k,m] = B[k,n] * G^T
                        gemm(Bm, trans_b, G, true, GA, k, n, m);
                    }
                }
                if (b.requires_grad()) {
                    double* GB = b.impl()->grad_buffer().data() + s * k * n;
                    if (!trans_b) {
                        // dB[k,n] = A^T * G
                        gemm(A, !trans_a, G, false, GB, k, m, n);
                    } else {
                        // stored B is [n,k]: dB^T[n,k] = G^T * A
                        gemm(G, true, A, trans_a, GB, n, m, k);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t groups = 1;
    std::size_t padding = 0;
};

/// Cross-correlation over NCHW input with OIHW kernel (I = C_in / groups).
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dOptions opt = {}) {
    detail::require(input.rank() == 4, "conv2d: input must be rank 4 (B x C x H x W)");
    detail::require(kernel.rank() == 4, "conv2d: kernel must be rank 4");
    if (opt.stride == 0 || opt.dilation == 0 || opt.groups == 0) throw ShapeError("conv2d: stride/dilation/groups must be >= 1");
    const std::size_t B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Co = kernel.dim(0), Cg = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents 2/3 must be odd");
    if (Ci % opt.groups != 0) throw ShapeError("conv2d: input channel extent 1 not divisible by groups");
    if (Co % opt.groups != 0) throw ShapeError("conv2d: kernel extent 0 not divisible by groups");
    if (Cg != Ci / opt.groups) {
        throw ShapeError("conv2d: kernel extent 1 (" + std::to_string(Cg) + ") must equal C_in/groups (" +
                         std::to_string(Ci / opt.groups) + ")");
    }
    const long span_h = static_cast<long>(opt.dilation * (kh - 1) + 1);
    const long span_w = static_cast<long>(opt.dilation * (kw - 1) + 1);
    const long ph = static_cast<long>(H + 2 * opt.padding), pw = static_cast<long>(W + 2 * opt.padding);
    if (span_h > ph) throw ShapeError("conv2d: dilated kernel taller than padded extent 2");
    if (span_w > pw) throw ShapeError("conv2d: dilated kernel wider than padded extent 3");
    const std::size_t Ho = static_cast<std::size_t>((ph - span_h) / static_cast<long>(opt.stride) + 1);
    const std::size_t Wo = static_cast<std::size_t>((pw - span_w) / static_cast<long>(opt.stride) + 1);
    const std::size_t Og = Co / opt.groups;

    // Visits every (output, input, kernel) triple that lies in bounds.
    auto visit = [=](auto&& fn) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oc = 0; oc < Co; ++oc) {
                const std::size_t grp = oc / Og;
                for (std::size_t icg = 0; icg < Cg; ++icg) {
                    const std::size_t ic = grp * Cg + icg;
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::size_t kidx = ((oc * Cg + icg) * kh + u) * kw + v;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const long iy = static_cast<long>(oy * opt.stride + u * opt.dilation) -
                                                static_cast<long>(opt.padding);
                                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                const std::size_t obase = ((b * Co + oc) * Ho + oy) * Wo;
                                const std::size_t ibase = ((b * Ci + ic) * H + static_cast<std::size_t>(iy)) * W;
                                for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    const long ix = static_cast<long>(ox * opt.stride + v * opt.dilation) -
                                                    static_cast<long>(opt.padding);
                                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                    fn(obase + ox, ibase + static_cast<std::size_t>(ix), kidx);
                                }
                            }
                        }
                }
            }
    };

    std::vector<double> out(B * Co * Ho * Wo, 0.0);
    const double* x = input.data().data();
    const double* k = kernel.data().data();
    visit([&](std::size_t o, std::size_t i, std::size_t ki) { out[o] += k[ki] * x[i]; });
    return detail::make_result({B, Co, Ho, Wo}, std::move(out), {&input, &kernel},
                               [input, kernel, visit](std::span<const double> g) {
                                   const double* x = input.data().data();
                                   const double* k = kernel.data().data();
                                   const bool gi = input.requires_grad(), gk = kernel.requires_grad();
                                   double* gx = gi ? input.impl()->grad_buffer().data() : nullptr;
                                   double* gw = gk ? kernel.impl()->grad_buffer().data() : nullptr;
                                   visit([&](std::size_t o, std::size_t i, std::size_t ki) {
                                       if (gi) gx[i] += k[ki] * g[o];
                                       if (gk) gw[ki] += x[i] * g[o];
                                   });
                               });
}

enum class PoolKind { Average, Maximum };

struct Pool2dOptions {
    std::size_t window = 3;
    std::size_t stride = 1;
    std::size_t padding = 1;
    /// Average pooling only: divide by the full window area instead of the in-bounds count.
    bool count_include_pad = false;
};

/// Pooling over NCHW input. Padded cells never win a maximum and, unless
/// count_include_pad is set, never enter an average's denominator.
inline Tensor pool2d(const Tensor& input, PoolKind kind, Pool2dOptions opt = {}) {
    detail::require(input.rank() == 4, "pool2d: input must be rank 4");
    if (opt.window == 0 || opt.stride == 0) throw ShapeError("pool2d: window and stride must be >= 1");
    const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (opt.window > H + 2 * opt.padding) throw ShapeError("pool2d: window larger than padded extent 2");
    if (opt.window > W + 2 * opt.padding) throw ShapeError("pool2d: window larger than padded extent 3");
    const std::size_t Ho = (H + 2 * opt.padding - opt.window) / opt.stride + 1;
    const std::size_t Wo = (W + 2 * opt.padding - opt.window) / opt.stride + 1;
    const std::size_t n_out = B * C * Ho * Wo;
    std::vector<double> out(n_out);
    // For maximum: source index of the winner; for average: divisor per output.
    std::vector<std::size_t> argmax;
    std::vector<double> divisor;
    if (kind == PoolKind::Maximum) argmax.resize(n_out); else divisor.resize(n_out);
    const double* x = input.data().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::size_t o = (bc * Ho + oy) * Wo + ox;
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                double acc = 0.0;
                std::size_t count = 0;
                bool found = false;
                for (std::size_t u = 0; u < opt.window; ++u) {
                    const long iy = static_cast<long>(oy * opt.stride + u) - static_cast<long>(opt.padding);
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t v = 0; v < opt.window; ++v) {
                        const long ix = static_cast<long>(ox * opt.stride + v) - static_cast<long>(opt.padding);
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        const std::size_t i = (bc * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                        if (kind == PoolKind::Maximum) {
                            if (!found || x[i] > best) {
                                best = x[i];
                                best_idx = i;
                                found = true;
                            }
                        } else {
                            acc += x[i];
                            ++count;
                        }
                    }
                }
                if (kind == PoolKind::Maximum) {
                    if (!found) throw ShapeError("pool2d: window covers no in-bounds cell");
                    out[o] = best;
                    argmax[o] = best_idx;
                } else {
                    if (count == 0) throw ShapeError("pool2d: window covers no in-bounds cell");
                    const double d = opt.count_include_pad ? static_cast<double>(opt.window * opt.window)
                                                           : static_cast<double>(count);
                    out[o] = acc / d;
                    divisor[o] = d;
                }
            }
    return detail::make_result(
        {B, C, Ho, Wo}, std::move(out), {&input},
        [input, kind, opt, H, W, Ho, Wo, B, C, argmax = std::move(argmax),
         divisor = std::move(divisor)](std::span<const double> g) {
            auto gx = input.impl()->grad_buffer();
            if (kind == PoolKind::Maximum) {
                for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                return;
            }
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const std::size_t o = (bc * Ho + oy) * Wo + ox;
                        const double share = g[o] / divisor[o];
                        for (std::size_t u = 0; u < opt.window; ++u) {
                            const long iy = static_cast<long>(oy * opt.stride + u) - static_cast<long>(opt.padding);
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            for (std::size_t v = 0; v < opt.window; ++v) {
                                const long ix = static_cast<long>(ox * opt.stride + v) - static_cast<long>(opt.padding);
                                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                gx[(bc * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] += share;
                            }
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax along the last extent, max-shifted.
inline Tensor softmax_lastdim(const Tensor& x) {
    x.check_finite("softmax_lastdim input");
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    const double* v = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = v + r * n;
        double* o = out.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(row[j] - mx);
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    auto probs = std::make_shared<std::vector<double>>(out);
    return detail::make_result(x.shape(), std::move(out), {&x}, [x, probs, n, rows](std::span<const double> g) {
        auto gx = x.impl()->grad_buffer();
        const double* p = probs->data();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * p[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[r * n + j] * (g[r * n + j] - dot);
        }
    });
}

/// Layer normalization across the channel extent (dim 1) at every grid position.
inline Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require(x.rank() >= 2, "layer_norm_channels: input needs rank >= 2");
    const std::size_t B = x.dim(0), C = x.dim(1), P = detail::trailing(x.shape(), 2);
    detail::require(gamma.rank() == 1 && gamma.dim(0) == C, "layer_norm_channels: gamma extent 0 must equal channels");
    detail::require(beta.rank() == 1 && beta.dim(0) == C, "layer_norm_channels: beta extent 0 must equal channels");
    std::vector<double> out(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(B * P);
    const double* v = x.data().data();
    const double* gm = gamma.data().data();
    const double* bt = beta.data().data();
    std::vector<double> mu(P), var(P);
    for (std::size_t b = 0; b < B; ++b) {
        std::fill(mu.begin(), mu.end(), 0.0);
        std::fill(var.begin(), var.end(), 0.0);
        for (std::size_t c = 0; c < C; ++c) {
            const double* row = v + (b * C + c) * P;
            for (std::size_t p = 0; p < P; ++p) mu[p] += row[p];
        }
        for (std::size_t p = 0; p < P; ++p) mu[p] /= static_cast<double>(C);
        for (std::size_t c = 0; c < C; ++c) {
            const double* row = v + (b * C + c) * P;
            for (std::size_t p = 0; p < P; ++p) {
                const double d = row[p] - mu[p];
                var[p] += d * d;
            }
        }
        for (std::size_t p = 0; p < P; ++p) (*inv_std)[b * P + p] = 1.0 / std::sqrt(var[p] / static_cast<double>(C) + eps);
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * P;
            for (std::size_t p = 0; p < P; ++p) {
                const double h = (v[off + p] - mu[p]) * (*inv_std)[b * P + p];
                (*xhat)[off + p] = h;
                out[off + p] = h * gm[c] + bt[c];
            }
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {&x, &gamma, &beta}, [x, gamma, beta, xhat, inv_std, B, C, P](std::span<const double> g) {
            const double* gm = gamma.data().data();
            const double* xh = xhat->data();
            if (gamma.requires_grad() || beta.requires_grad()) {
                double* gg = gamma.requires_grad() ? gamma.impl()->grad_buffer().data() : nullptr;
                double* gb = beta.requires_grad() ? beta.impl()->grad_buffer().data() : nullptr;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t off = (b * C + c) * P;
                        double sg = 0.0, sb = 0.0;
                        for (std::size_t p = 0; p < P; ++p) {
                            sg += g[off + p] * xh[off + p];
                            sb += g[off + p];
                        }
                        if (gg) gg[c] += sg;
                        if (gb) gb[c] += sb;
                    }
            }
            if (!x.requires_grad()) return;
            auto gx = x.impl()->grad_buffer();
            std::vector<double> m1(P), m2(P);
            const double invC = 1.0 / static_cast<double>(C);
            for (std::size_t b = 0; b < B; ++b) {
                std::fill(m1.begin(), m1.end(), 0.0);
                std::fill(m2.begin(), m2.end(), 0.0);
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (b * C + c) * P;
                    for (std::size_t p = 0; p < P; ++p) {
                        const double dh = g[off + p] * gm[c];
                        m1[p] += dh;
                        m2[p] += dh * xh[off + p];
                    }
                }
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (b * C + c) * P;
                    for (std::size_t p = 0; p < P; ++p) {
                        const double dh = g[off + p] * gm[c];
                        gx[off + p] += (*inv_std)[b * P + p] * (dh - invC * m1[p] - invC * xh[off + p] * m2[p]);
                    }
                }
            }
        });
}

}  // namespace naslora
