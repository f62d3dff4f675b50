// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string_view>
#include <vector>

#include "naslora/ops.hpp"
#include "naslora/random.hpp"

namespace naslora {

/// Candidate operations of the search cell. The enumeration order is the index order of alpha.
enum class CandidateOpKind : std::size_t {
    SepConv3 = 0,
    SepConv5,
    DilConv3,
    DilConv5,
    AvgPool3,
    MaxPool3,
    Skip,
    Zero,
};

inline constexpr std::size_t kNumCandidateOps = 8;

inline constexpr std::array<CandidateOpKind, kNumCandidateOps> kAllCandidateOps = {
    CandidateOpKind::SepConv3, CandidateOpKind::SepConv5, CandidateOpKind::DilConv3, CandidateOpKind::DilConv5,
    CandidateOpKind::AvgPool3, CandidateOpKind::MaxPool3, CandidateOpKind::Skip,     CandidateOpKind::Zero,
};

inline constexpr std::string_view op_name(CandidateOpKind kind) {
    constexpr std::array<std::string_view, kNumCandidateOps> names = {
        "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
        "avg_pool_3x3", "max_pool_3x3", "skip_connect", "none",
    };
    return names[static_cast<std::size_t>(kind)];
}

inline constexpr std::size_t op_index(CandidateOpKind kind) { return static_cast<std::size_t>(kind); }

/// Spatial kernel size of a parametric op (0 for non-parametric kinds).
inline constexpr std::size_t op_kernel_size(CandidateOpKind kind) {
    switch (kind) {
        case CandidateOpKind::SepConv3:
        case CandidateOpKind::DilConv3: return 3;
        case CandidateOpKind::SepConv5:
        case CandidateOpKind::DilConv5: return 5;
        default: return 0;
    }
}

inline constexpr bool is_sep_conv(CandidateOpKind k) {
    return k == CandidateOpKind::SepConv3 || k == CandidateOpKind::SepConv5;
}
inline constexpr bool is_dil_conv(CandidateOpKind k) {
    return k == CandidateOpKind::DilConv3 || k == CandidateOpKind::DilConv5;
}

inline constexpr std::size_t kDilation = 2;
/// Side of the folded kernel: the receptive field of a 5x5 kernel at dilation 2.
inline constexpr std::size_t kFoldKernel = 9;
inline constexpr double kFoldTolerance = 1e-6;

/// Parameters of one candidate op. Separable convs use `depthwise` [r x 1 x k x k] and
/// `pointwise` [r x r]; dilated convs use `kernel` [r x r x k x k]. Others are empty.
struct CandidateOpParams {
    Tensor depthwise;
    Tensor pointwise;
    Tensor kernel;

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (const Tensor* t : {&depthwise, &pointwise, &kernel}) {
            if (t->defined()) out.push_back(*t);
        }
        return out;
    }
};

inline CandidateOpParams make_op_params(CandidateOpKind kind, std::size_t width, Rng& rng) {
    CandidateOpParams p;
    const std::size_t k = op_kernel_size(kind);
    if (is_sep_conv(kind)) {
        p.depthwise = kaiming_uniform({width, 1, k, k}, k * k, rng);
        p.pointwise = kaiming_uniform({width, width}, width, rng);
    } else if (is_dil_conv(kind)) {
        p.kernel = kaiming_uniform({width, width, k, k}, width * k * k, rng);
    }
    return p;
}

/// Static partial-connection mask over the cell's channels.
struct ChannelMask {
    std::vector<bool> selected;

    std::size_t width() const { return selected.size(); }
    std::size_t count() const { return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), true)); }
    double ratio() const { return selected.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(width()); }
    std::vector<std::size_t> indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < selected.size(); ++i) {
            if (selected[i]) idx.push_back(i);
        }
        return idx;
    }
    std::vector<std::size_t> unselected() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < selected.size(); ++i) {
            if (!selected[i]) idx.push_back(i);
        }
        return idx;
    }

    static ChannelMask all(std::size_t r) { return ChannelMask{std::vector<bool>(r, true)}; }
};

/// Selects round(ratio * r) channels by a seeded draw without replacement.
inline ChannelMask make_channel_mask(std::size_t r, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("make_channel_mask: ratio must lie in [0, 1]");
    const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(r)));
    std::vector<std::size_t> order(r);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    ChannelMask mask{std::vector<bool>(r, false)};
    for (std::size_t i = 0; i < k; ++i) mask.selected[order[i]] = true;
    return mask;
}

/// Softmax relaxation of the architecture logits.
inline Tensor blend_weights(const Tensor& alpha) {
    if (alpha.rank() != 1 || alpha.dim(0) != kNumCandidateOps) {
        throw ShapeError("blend_weights: alpha must have shape [8], got " + shape_str(alpha.shape()));
    }
    alpha.check_finite("alpha");
    return softmax_lastdim(alpha);
}

/// sum_i weights[i] * terms[i]; undefined terms count as zero.
inline Tensor weighted_sum(const std::vector<Tensor>& terms, const Tensor& weights) {
    if (terms.size() != weights.numel()) throw ShapeError("weighted_sum: one weight per term required");
    Shape shape;
    for (const Tensor& t : terms) {
        if (!t.defined()) continue;
        if (shape.empty()) shape = t.shape();
        if (t.shape() != shape) throw ShapeError("weighted_sum: term shapes differ");
    }
    if (shape.empty()) throw ShapeError("weighted_sum: no defined terms");
    std::vector<double> out(shape_numel(shape), 0.0);
    const auto w = weights.data();
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (!terms[i].defined()) continue;
        const auto v = terms[i].data();
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w[i] * v[j];
    }
    GradTape* tape = GradTape::current();
    Tensor result(shape, std::move(out));
    bool tracked = weights.requires_grad();
    for (const Tensor& t : terms) tracked = tracked || (t.defined() && t.requires_grad());
    if (tape && tracked) {
        result.impl()->requires_grad = true;
        result.impl()->is_leaf = false;
        tape->record(result, [terms, weights](std::span<const double> g) {
            const auto w = weights.data();
            for (std::size_t i = 0; i < terms.size(); ++i) {
                const Tensor& t = terms[i];
                if (!t.defined()) continue;
                if (t.requires_grad()) {
                    auto gt = t.impl()->grad_buffer();
                    for (std::size_t j = 0; j < g.size(); ++j) gt[j] += w[i] * g[j];
                }
                if (weights.requires_grad()) {
                    const auto v = t.data();
                    double s = 0.0;
                    for (std::size_t j = 0; j < g.size(); ++j) s += v[j] * g[j];
                    weights.impl()->grad_buffer()[i] += s;
                }
            }
        });
        tape->note_input(weights);
        for (const Tensor& t : terms) tape->note_input(t);
    }
    return result;
}

/// Applies one candidate op with same-padding. Returns an undefined tensor for Zero
/// when `materialize_zero` is false.
inline Tensor apply_candidate(CandidateOpKind kind, const CandidateOpParams& params, const Tensor& feat,
                              bool materialize_zero = true) {
    if (feat.rank() != 4) throw ShapeError("apply_candidate: feature must be rank 4");
    const std::size_t width = feat.dim(1);
    auto check_width = [&](const Tensor& t, std::size_t dim) {
        if (!t.defined()) throw ShapeError(std::string("apply_candidate: missing parameters for ") + std::string(op_name(kind)));
        if (t.dim(dim) != width) {
            throw ShapeError(std::string("apply_candidate: ") + std::string(op_name(kind)) + " allocated for width " +
                             std::to_string(t.dim(dim)) + ", feature extent 1 is " + std::to_string(width));
        }
    };
    const std::size_t k = op_kernel_size(kind);
    switch (kind) {
        case CandidateOpKind::SepConv3:
        case CandidateOpKind::SepConv5: {
            check_width(params.depthwise, 0);
            check_width(params.pointwise, 1);
            Tensor dw = conv2d(feat, params.depthwise, {.stride = 1, .dilation = 1, .groups = width, .padding = (k - 1) / 2});
            return project_channels(dw, params.pointwise);
        }
        case CandidateOpKind::DilConv3:
        case CandidateOpKind::DilConv5:
            check_width(params.kernel, 1);
            return conv2d(feat, params.kernel,
                          {.stride = 1, .dilation = kDilation, .groups = 1, .padding = kDilation * (k - 1) / 2});
        case CandidateOpKind::AvgPool3:
            // Full-window divisor keeps the op a fixed linear stencil, which folding requires.
            return pool2d(feat, PoolKind::Average, {.window = 3, .stride = 1, .padding = 1, .count_include_pad = true});
        case CandidateOpKind::MaxPool3:
            return pool2d(feat, PoolKind::Maximum, {.window = 3, .stride = 1, .padding = 1});
        case CandidateOpKind::Skip:
            return feat;
        case CandidateOpKind::Zero:
            return materialize_zero ? Tensor::zeros(feat.shape()) : Tensor();
    }
    throw std::logic_error("apply_candidate: unknown kind");
}

/// Search cell: architecture logits, per-op parameters at the masked width, and a static mask.
class NasCell {
public:
    NasCell() = default;

    /// Parameters drawn from `rng`; alpha ~ alpha_scale * N(0, 1).
    NasCell(std::size_t width, ChannelMask mask, Rng& rng, double alpha_scale = 1e-3) : width_(width), mask_(std::move(mask)) {
        if (mask_.width() != width_) throw ShapeError("NasCell: mask length must equal cell width");
        alpha_ = randn({kNumCandidateOps}, rng, alpha_scale, true);
        const std::size_t active = mask_.count();
        if (active > 0) {
            for (CandidateOpKind kind : kAllCandidateOps) ops_[op_index(kind)] = make_op_params(kind, active, rng);
        }
    }

    std::size_t width() const { return width_; }
    std::size_t active_width() const { return mask_.count(); }
    const ChannelMask& mask() const { return mask_; }
    const Tensor& alpha() const { return alpha_; }
    Tensor& alpha() { return alpha_; }
    const CandidateOpParams& op(CandidateOpKind kind) const { return ops_[op_index(kind)]; }
    CandidateOpParams& op(CandidateOpKind kind) { return ops_[op_index(kind)]; }

    /// All candidate-op kernels (the weight-side parameters of the cell).
    std::vector<Tensor> op_parameters() const {
        std::vector<Tensor> out;
        for (const auto& p : ops_) {
            for (const Tensor& t : p.tensors()) out.push_back(t);
        }
        return out;
    }

    std::size_t op_parameter_count() const {
        std::size_t n = 0;
        for (const Tensor& t : op_parameters()) n += t.numel();
        return n;
    }

    Tensor blend() const { return blend_weights(alpha_); }

    /// Unselected channels pass through; selected channels are replaced by the blended ops.
    Tensor forward(const Tensor& feat) const {
        if (feat.rank() != 4) throw ShapeError("cell_forward: feature must be rank 4");
        if (feat.dim(1) != width_) {
            throw ShapeError("cell_forward: feature extent 1 (" + std::to_string(feat.dim(1)) + ") must equal cell width " +
                             std::to_string(width_));
        }
        const std::size_t active = active_width();
        if (active == 0) return feat;
        const bool full = active == width_;
        const auto idx = mask_.indices();
        Tensor sub = full ? feat : select_channels(feat, idx);
        const Tensor weights = blend();
        std::vector<Tensor> terms;
        terms.reserve(kNumCandidateOps);
        for (CandidateOpKind kind : kAllCandidateOps) terms.push_back(apply_candidate(kind, op(kind), sub, false));
        Tensor mixed = weighted_sum(terms, weights);
        return full ? mixed : merge_channels(feat, mixed, idx);
    }

    /// Restores state from stored tensors (checkpoint loading).
    static NasCell from_parts(std::size_t width, ChannelMask mask, Tensor alpha, std::array<CandidateOpParams, kNumCandidateOps> ops) {
        NasCell cell;
        cell.width_ = width;
        cell.mask_ = std::move(mask);
        cell.alpha_ = std::move(alpha);
        cell.ops_ = std::move(ops);
        return cell;
    }

private:
    std::size_t width_ = 0;
    ChannelMask mask_;
    Tensor alpha_;
    std::array<CandidateOpParams, kNumCandidateOps> ops_;
};

inline Tensor cell_forward(const NasCell& cell, const Tensor& feat) { return cell.forward(feat); }

/// Result of folding W_d . cell . W_e into a single 9x9 convolution.
struct FoldResult {
    bool folded = false;
    /// [C_out x C_in x 9 x 9]; defined only when folded.
    Tensor kernel;
    /// Blend weight on max pooling, reported when folding is refused.
    double maxpool_weight = 0.0;
};

/// Linear map of the cell on its r channels as an [r x r x 9 x 9] stencil.
inline std::vector<double> cell_stencil(const NasCell& cell) {
    GradTape::Pause pause;
    const std::size_t r = cell.width(), K = kFoldKernel, c = K / 2;
    std::vector<double> st(r * r * K * K, 0.0);
    auto at = [&](std::size_t o, std::size_t i, std::size_t u, std::size_t v) -> double& {
        return st[((o * r + i) * K + u) * K + v];
    };
    for (std::size_t ch : cell.mask().unselected()) at(ch, ch, c, c) += 1.0;
    if (cell.active_width() == 0) return st;

    const auto idx = cell.mask().indices();
    const std::size_t a = idx.size();
    const Tensor w = cell.blend();
    const auto wv = w.data();
    for (CandidateOpKind kind : kAllCandidateOps) {
        const double wk = wv[op_index(kind)];
        const auto& p = cell.op(kind);
        const std::size_t k = op_kernel_size(kind);
        if (kind == CandidateOpKind::Skip) {
            for (std::size_t j = 0; j < a; ++j) at(idx[j], idx[j], c, c) += wk;
        } else if (kind == CandidateOpKind::AvgPool3) {
            for (std::size_t j = 0; j < a; ++j)
                for (std::size_t u = c - 1; u <= c + 1; ++u)
                    for (std::size_t v = c - 1; v <= c + 1; ++v) at(idx[j], idx[j], u, v) += wk / 9.0;
        } else if (is_sep_conv(kind)) {
            const auto dw = p.depthwise.data();
            const auto pw = p.pointwise.data();
            const std::size_t off = c - (k - 1) / 2;
            for (std::size_t o = 0; o < a; ++o)
                for (std::size_t i = 0; i < a; ++i)
                    for (std::size_t u = 0; u < k; ++u)
                        for (std::size_t v = 0; v < k; ++v)
                            at(idx[o], idx[i], off + u, off + v) += wk * pw[o * a + i] * dw[(i * k + u) * k + v];
        } else if (is_dil_conv(kind)) {
            const auto kv = p.kernel.data();
            const std::size_t off = c - kDilation * (k - 1) / 2;
            for (std::size_t o = 0; o < a; ++o)
                for (std::size_t i = 0; i < a; ++i)
                    for (std::size_t u = 0; u < k; ++u)
                        for (std::size_t v = 0; v < k; ++v)
                            at(idx[o], idx[i], off + kDilation * u, off + kDilation * v) += wk * kv[((o * a + i) * k + u) * k + v];
        }
        // Zero contributes nothing; MaxPool3 is excluded by the caller's threshold check.
    }
    return st;
}

/// Folds W_d . cell(W_e x) into an equivalent 9x9 convolution kernel (W0 not included).
/// Refuses when the max-pool blend weight exceeds kFoldTolerance.
inline FoldResult fold_cell(const NasCell& cell, const Tensor& w_enc, const Tensor& w_dec) {
    const std::size_t r = cell.width();
    if (w_enc.rank() != 2 || w_enc.dim(0) != r) throw ShapeError("fold_cell: W_e extent 0 must equal cell width");
    if (w_dec.rank() != 2 || w_dec.dim(1) != r) throw ShapeError("fold_cell: W_d extent 1 must equal cell width");
    GradTape::Pause pause;
    FoldResult result;
    if (cell.active_width() > 0) {
        result.maxpool_weight = cell.blend().data()[op_index(CandidateOpKind::MaxPool3)];
        if (result.maxpool_weight > kFoldTolerance) return result;
    }
    const std::size_t Cin = w_enc.dim(1), Cout = w_dec.dim(0), K = kFoldKernel, KK = K * K;
    const auto st = cell_stencil(cell);
    const auto we = w_enc.data();
    const auto wd = w_dec.data();
    // tmp[o_r, ci, t] = sum_i st[o_r, i, t] * W_e[i, ci]
    std::vector<double> tmp(r * Cin * KK, 0.0);
    for (std::size_t o = 0; o < r; ++o)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t t = 0; t < KK; ++t) {
                const double s = st[(o * r + i) * KK + t];
                if (s == 0.0) continue;
                for (std::size_t ci = 0; ci < Cin; ++ci) tmp[(o * Cin + ci) * KK + t] += s * we[i * Cin + ci];
            }
    std::vector<double> kernel(Cout * Cin * KK, 0.0);
    for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t o = 0; o < r; ++o) {
            const double d = wd[co * r + o];
            if (d == 0.0) continue;
            const double* src = tmp.data() + o * Cin * KK;
            double* dst = kernel.data() + co * Cin * KK;
            for (std::size_t j = 0; j < Cin * KK; ++j) dst[j] += d * src[j];
        }
    result.folded = true;
    result.kernel = Tensor({Cout, Cin, K, K}, std::move(kernel));
    return result;
}

/// Mean of the blend weights over cells, per op kind.
inline Tensor op_proportions(const std::vector<const NasCell*>& cells) {
    if (cells.empty()) throw std::invalid_argument("op_proportions: empty cell list");
    GradTape::Pause pause;
    std::vector<double> acc(kNumCandidateOps, 0.0);
    for (const NasCell* c : cells) {
        const Tensor w = c->blend();
        for (std::size_t i = 0; i < kNumCandidateOps; ++i) acc[i] += w.data()[i];
    }
    for (double& v : acc) v /= static_cast<double>(cells.size());
    return Tensor({kNumCandidateOps}, std::move(acc));
}

}  // namespace naslora
