// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "naslora/nas_cell.hpp"

namespace naslora {

enum class AdapterVariant { None, LoRA, NasLoRA, NasPcLoRA };

inline std::string_view variant_name(AdapterVariant v) {
    switch (v) {
        case AdapterVariant::None: return "decoder_only";
        case AdapterVariant::LoRA: return "lora";
        case AdapterVariant::NasLoRA: return "nas_lora";
        case AdapterVariant::NasPcLoRA: return "nas_pc_lora";
    }
    return "?";
}

inline AdapterVariant parse_variant(std::string_view s) {
    if (s == "decoder_only" || s == "none") return AdapterVariant::None;
    if (s == "lora") return AdapterVariant::LoRA;
    if (s == "nas_lora") return AdapterVariant::NasLoRA;
    if (s == "nas_pc_lora") return AdapterVariant::NasPcLoRA;
    throw std::invalid_argument("unknown adapter variant '" + std::string(s) + "'");
}

/// Pretrained projection W0 [C_out x C_in]; never tracked.
struct FrozenProjection {
    Tensor weight;

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return weight.dim(0); }
    Tensor forward(const Tensor& x) const { return project_channels(x, weight); }
};

/// Low-rank update W_d . [cell] . W_e attached to one frozen projection.
class Adapter {
public:
    Adapter() = default;

    /// W_e ~ U(+-1/sqrt(C_in)), W_d = 0. `ratio` is used only by NasPcLoRA.
    static Adapter create(AdapterVariant variant, std::size_t in_ch, std::size_t out_ch, std::size_t rank, double ratio,
                          Rng& rng, std::uint64_t mask_seed, double alpha_scale = 1e-3) {
        if (variant == AdapterVariant::None) throw std::invalid_argument("Adapter::create: variant None has no adapter");
        check_rank(rank, in_ch, out_ch);
        Adapter a;
        a.variant_ = variant;
        a.w_enc_ = kaiming_uniform({rank, in_ch}, in_ch, rng);
        a.w_dec_ = Tensor::zeros({out_ch, rank}, true);
        if (variant != AdapterVariant::LoRA) {
            ChannelMask mask = variant == AdapterVariant::NasLoRA ? ChannelMask::all(rank)
                                                                  : make_channel_mask(rank, ratio, mask_seed);
            a.cell_ = NasCell(rank, std::move(mask), rng, alpha_scale);
        }
        return a;
    }

    static Adapter from_parts(AdapterVariant variant, Tensor w_enc, Tensor w_dec, std::optional<NasCell> cell) {
        if ((variant == AdapterVariant::LoRA) == cell.has_value()) {
            throw std::invalid_argument("Adapter: cell must be present iff the variant is a NAS variant");
        }
        if (w_enc.rank() != 2 || w_dec.rank() != 2 || w_dec.dim(1) != w_enc.dim(0)) {
            throw ShapeError("Adapter: W_e [r x C_in] and W_d [C_out x r] disagree on r");
        }
        check_rank(w_enc.dim(0), w_enc.dim(1), w_dec.dim(0));
        if (cell && cell->width() != w_enc.dim(0)) throw ShapeError("Adapter: cell width must equal rank");
        Adapter a;
        a.variant_ = variant;
        a.w_enc_ = std::move(w_enc);
        a.w_dec_ = std::move(w_dec);
        a.cell_ = std::move(cell);
        return a;
    }

    AdapterVariant variant() const { return variant_; }
    std::size_t rank() const { return w_enc_.dim(0); }
    const Tensor& w_enc() const { return w_enc_; }
    const Tensor& w_dec() const { return w_dec_; }
    Tensor& w_enc() { return w_enc_; }
    Tensor& w_dec() { return w_dec_; }
    bool has_cell() const { return cell_.has_value(); }
    const NasCell& cell() const { return *cell_; }
    NasCell& cell() { return *cell_; }

    /// W_e, W_d and every candidate-op kernel.
    std::vector<Tensor> weight_parameters() const {
        std::vector<Tensor> out{w_enc_, w_dec_};
        if (cell_) {
            for (const Tensor& t : cell_->op_parameters()) out.push_back(t);
        }
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = w_enc_.numel() + w_dec_.numel();
        if (cell_) n += kNumCandidateOps + cell_->op_parameter_count();
        return n;
    }

    /// The update path W_d(cell(W_e x)).
    Tensor delta(const Tensor& x) const {
        Tensor low = project_channels(x, w_enc_);
        if (cell_) low = cell_->forward(low);
        return project_channels(low, w_dec_);
    }

private:
    static void check_rank(std::size_t rank, std::size_t in_ch, std::size_t out_ch) {
        if (rank == 0 || 2 * rank >= std::min(in_ch, out_ch)) {
            throw std::invalid_argument("Adapter: rank " + std::to_string(rank) + " must satisfy 0 < r < min(C_in, C_out)/2");
        }
    }

    AdapterVariant variant_ = AdapterVariant::LoRA;
    Tensor w_enc_;
    Tensor w_dec_;
    std::optional<NasCell> cell_;
};

inline Tensor adapter_forward(const Adapter& adapter, const FrozenProjection& frozen, const Tensor& x) {
    if (adapter.w_enc().dim(1) != frozen.in_channels() || adapter.w_dec().dim(0) != frozen.out_channels()) {
        throw ShapeError("adapter_forward: adapter and frozen projection disagree on channel extents");
    }
    return add(frozen.forward(x), adapter.delta(x));
}

/// Inference form of an adapted projection.
struct MergedProjection {
    enum class Kind { Dense, Conv, Composite };

    Kind kind = Kind::Dense;
    /// Dense: [C_out x C_in]; Conv: [C_out x C_in x 9 x 9] with W0 at the center tap.
    Tensor weight;
    /// Composite only: frozen copies evaluated directly.
    std::optional<Adapter> adapter;
    std::optional<FrozenProjection> frozen;
    /// Max-pool blend weight that forced the composite form.
    double maxpool_weight = 0.0;

    Tensor forward(const Tensor& x) const {
        switch (kind) {
            case Kind::Dense: return project_channels(x, weight);
            case Kind::Conv:
                return conv2d(x, weight, {.stride = 1, .dilation = 1, .groups = 1, .padding = kFoldKernel / 2});
            case Kind::Composite: return adapter_forward(*adapter, *frozen, x);
        }
        throw std::logic_error("MergedProjection: unknown kind");
    }
};

inline std::string_view merged_kind_name(MergedProjection::Kind k) {
    switch (k) {
        case MergedProjection::Kind::Dense: return "dense";
        case MergedProjection::Kind::Conv: return "conv";
        case MergedProjection::Kind::Composite: return "composite";
    }
    return "?";
}

inline Adapter frozen_copy(const Adapter& a) {
    std::optional<NasCell> cell;
    if (a.has_cell()) {
        const NasCell& c = a.cell();
        std::array<CandidateOpParams, kNumCandidateOps> ops;
        for (CandidateOpKind k : kAllCandidateOps) {
            const auto& p = c.op(k);
            auto& q = ops[op_index(k)];
            if (p.depthwise.defined()) q.depthwise = p.depthwise.detach();
            if (p.pointwise.defined()) q.pointwise = p.pointwise.detach();
            if (p.kernel.defined()) q.kernel = p.kernel.detach();
        }
        cell = NasCell::from_parts(c.width(), c.mask(), c.alpha().detach(), std::move(ops));
    }
    return Adapter::from_parts(a.variant(), a.w_enc().detach(), a.w_dec().detach(), std::move(cell));
}

/// Dense W0 + W_d W_e for LoRA; folded 9x9 kernel for NAS variants; composite when max
/// pooling carries blend weight above the fold tolerance.
inline MergedProjection merge(const Adapter& adapter, const FrozenProjection& frozen) {
    GradTape::Pause pause;
    MergedProjection m;
    const std::size_t Cin = frozen.in_channels(), Cout = frozen.out_channels(), r = adapter.rank();
    if (!adapter.has_cell()) {
        std::vector<double> w(frozen.weight.data().begin(), frozen.weight.data().end());
        const auto wd = adapter.w_dec().data();
        const auto we = adapter.w_enc().data();
        for (std::size_t o = 0; o < Cout; ++o)
            for (std::size_t k = 0; k < r; ++k) {
                const double d = wd[o * r + k];
                for (std::size_t i = 0; i < Cin; ++i) w[o * Cin + i] += d * we[k * Cin + i];
            }
        m.kind = MergedProjection::Kind::Dense;
        m.weight = Tensor({Cout, Cin}, std::move(w));
        return m;
    }
    FoldResult fold = fold_cell(adapter.cell(), adapter.w_enc(), adapter.w_dec());
    if (!fold.folded) {
        m.kind = MergedProjection::Kind::Composite;
        m.adapter = frozen_copy(adapter);
        m.frozen = FrozenProjection{frozen.weight.detach()};
        m.maxpool_weight = fold.maxpool_weight;
        return m;
    }
    std::vector<double> k(fold.kernel.data().begin(), fold.kernel.data().end());
    const std::size_t K = kFoldKernel, c = K / 2;
    const auto w0 = frozen.weight.data();
    for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t i = 0; i < Cin; ++i) k[((o * Cin + i) * K + c) * K + c] += w0[o * Cin + i];
    m.kind = MergedProjection::Kind::Conv;
    m.weight = Tensor({Cout, Cin, K, K}, std::move(k));
    m.maxpool_weight = fold.maxpool_weight;
    return m;
}

struct MergeReport {
    double max_rel_err = 0.0;
    bool pass = false;
};

/// ||a - b||_inf / ||b||_inf, with b the reference.
inline double max_relative_error(const Tensor& a, const Tensor& ref) {
    detail::require_same_shape(a, ref, "max_relative_error");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        num = std::max(num, std::abs(a[i] - ref[i]));
        den = std::max(den, std::abs(ref[i]));
    }
    return den > 0.0 ? num / den : num;
}

/// Compares merged and unmerged forwards on seeded random inputs [1 x C_in x H x W].
inline MergeReport verify_merge(const Adapter& adapter, const FrozenProjection& frozen, const MergedProjection& merged,
                                std::size_t trials, double tol, std::uint64_t seed = 0, std::size_t grid = 7) {
    if (trials == 0) throw std::invalid_argument("verify_merge: trials must be >= 1");
    GradTape::Pause pause;
    Rng rng(seed);
    MergeReport report;
    for (std::size_t t = 0; t < trials; ++t) {
        Tensor x = randn({1, frozen.in_channels(), grid, grid}, rng);
        report.max_rel_err = std::max(report.max_rel_err, max_relative_error(merged.forward(x), adapter_forward(adapter, frozen, x)));
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace naslora
