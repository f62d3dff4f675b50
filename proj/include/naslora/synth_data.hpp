// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "naslora/random.hpp"

namespace naslora {

enum class Split { Train, Val, Test };

inline std::string_view split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

enum class ShapeKind { Ellipse, Rectangle, Triangle, Diamond };

struct DataConfig {
    std::size_t image_size = 64;
    /// 1 for binary; up to 4 for multi-class (class c is drawn as shape kind c-1).
    std::size_t num_classes = 1;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    double noise_amplitude = 0.15;
    std::size_t train_size = 200;
    std::size_t val_size = 40;
    std::size_t test_size = 40;
    std::uint64_t seed = 7;

    std::size_t split_size(Split s) const {
        switch (s) {
            case Split::Train: return train_size;
            case Split::Val: return val_size;
            case Split::Test: return test_size;
        }
        return 0;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("data config: " + m); };
        if (image_size < 8) fail("image_size must be >= 8");
        if (num_classes < 1 || num_classes > 4) fail("num_classes must lie in 1..4");
        if (min_shapes < 1 || max_shapes < min_shapes || max_shapes > 3) fail("shapes per image must satisfy 1 <= min <= max <= 3");
        if (!(noise_amplitude >= 0.0 && noise_amplitude <= 0.3)) fail("noise_amplitude must lie in [0, 0.3]");
        if (train_size == 0 || val_size == 0 || test_size == 0) fail("split sizes must be >= 1");
    }
};

inline constexpr double kMinForegroundFraction = 0.05;
inline constexpr double kMaxForegroundFraction = 0.6;
inline constexpr double kMinContrast = 0.2;

struct SegSample {
    Tensor image;                      // [3 x S x S] in [0, 1]
    std::vector<std::uint8_t> labels;  // S*S in {0..K}
    std::size_t num_classes = 1;
    std::uint64_t sample_id = 0;
};

/// Identifiers of different splits live in disjoint ranges.
inline std::uint64_t sample_id(Split split, std::size_t index) {
    return (static_cast<std::uint64_t>(split) << 40) + index;
}

namespace detail {

/// Smooth value noise in [0, 1]: two octaves of bilinear-interpolated lattice values.
inline std::vector<double> value_noise(std::size_t S, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> out(S * S, 0.0);
    double weight_sum = 0.0;
    for (std::size_t cell : {16u, 8u}) {
        const double w = cell == 16 ? 0.65 : 0.35;
        const std::size_t L = S / cell + 2;
        std::vector<double> lattice(L * L);
        for (double& v : lattice) v = u(rng);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < S; ++x) {
                const double fy = double(y) / double(cell), fx = double(x) / double(cell);
                const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
                double ty = fy - double(iy), tx = fx - double(ix);
                ty = ty * ty * (3 - 2 * ty);
                tx = tx * tx * (3 - 2 * tx);
                const double a = lattice[iy * L + ix], b = lattice[iy * L + ix + 1];
                const double c = lattice[(iy + 1) * L + ix], d = lattice[(iy + 1) * L + ix + 1];
                out[y * S + x] += w * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
            }
        weight_sum += w;
    }
    for (double& v : out) v /= weight_sum;
    return out;
}

struct ShapeSpec {
    ShapeKind kind;
    double cy, cx, a, b, theta;
};

inline bool inside(const ShapeSpec& s, double y, double x) {
    const double dy = y - s.cy, dx = x - s.cx;
    const double c = std::cos(s.theta), sn = std::sin(s.theta);
    const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
    switch (s.kind) {
        case ShapeKind::Ellipse: return (u * u) / (s.a * s.a) + (v * v) / (s.b * s.b) <= 1.0;
        case ShapeKind::Rectangle: return std::abs(u) <= s.a && std::abs(v) <= s.b;
        case ShapeKind::Diamond: return std::abs(u) / s.a + std::abs(v) / s.b <= 1.0;
        case ShapeKind::Triangle: {
            // Vertices at radius a, angles 90, 210, 330 degrees in the rotated frame.
            constexpr double k = std::numbers::pi / 180.0;
            const double px[3] = {s.a * std::cos(90 * k), s.a * std::cos(210 * k), s.a * std::cos(330 * k)};
            const double py[3] = {s.a * std::sin(90 * k), s.a * std::sin(210 * k), s.a * std::sin(330 * k)};
            bool neg = false, pos = false;
            for (int i = 0; i < 3; ++i) {
                const int j = (i + 1) % 3;
                const double cross = (px[j] - px[i]) * (v - py[i]) - (py[j] - py[i]) * (u - px[i]);
                neg = neg || cross < 0;
                pos = pos || cross > 0;
            }
            return !(neg && pos);
        }
    }
    return false;
}

}  // namespace detail

/// Deterministic sample: value-noise background, 1..3 textured shapes with a contrasting
/// intensity. Draws are repeated until the foreground fraction and contrast bounds hold.
inline SegSample generate_sample(const DataConfig& cfg, Split split, std::size_t index) {
    cfg.validate();
    if (index >= cfg.split_size(split)) {
        throw std::out_of_range("generate_sample: index " + std::to_string(index) + " outside split " +
                                std::string(split_name(split)));
    }
    const std::size_t S = cfg.image_size, P = S * S;
    const std::uint64_t id = sample_id(split, index);
    Rng rng(derive_seed({cfg.seed, id}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const std::size_t n = cfg.min_shapes + static_cast<std::size_t>(u(rng) * double(cfg.max_shapes - cfg.min_shapes + 1));
        std::vector<std::uint8_t> labels(P, 0);
        for (std::size_t s = 0; s < n; ++s) {
            const auto cls = static_cast<std::uint8_t>(1 + std::min<std::size_t>(cfg.num_classes - 1, std::size_t(u(rng) * double(cfg.num_classes))));
            const ShapeKind kind = cfg.num_classes == 1 ? static_cast<ShapeKind>(std::min(3, int(u(rng) * 4)))
                                                        : static_cast<ShapeKind>(cls - 1);
            detail::ShapeSpec spec{kind,
                                   double(S) * (0.2 + 0.6 * u(rng)),
                                   double(S) * (0.2 + 0.6 * u(rng)),
                                   double(S) * (0.1 + 0.18 * u(rng)),
                                   double(S) * (0.1 + 0.18 * u(rng)),
                                   std::numbers::pi * u(rng)};
            if (kind == ShapeKind::Triangle) spec.a *= 1.4;
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x)
                    if (detail::inside(spec, double(y) + 0.5, double(x) + 0.5)) labels[y * S + x] = cls;
        }
        const auto fg = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v > 0; }));
        const double frac = double(fg) / double(P);

        const double base = 0.2 + 0.6 * u(rng);
        const double delta = 0.3 + 0.15 * u(rng);
        double sign = u(rng) < 0.5 ? -1.0 : 1.0;
        if (base + sign * delta > 0.95 || base + sign * delta < 0.05) sign = -sign;
        std::array<double, 3> tint_bg{}, tint_fg{};
        for (double& t : tint_bg) t = 0.1 * (u(rng) - 0.5);
        for (double& t : tint_fg) t = 0.1 * (u(rng) - 0.5);
        std::vector<double> img(3 * P);
        const std::vector<double> bg_noise = detail::value_noise(S, rng);
        const std::vector<double> fg_noise = detail::value_noise(S, rng);
        double sum_fg = 0.0, sum_bg = 0.0;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < P; ++p) {
                const std::uint8_t l = labels[p];
                double v;
                if (l == 0) {
                    v = base + tint_bg[c] + 2.0 * cfg.noise_amplitude * (bg_noise[p] - 0.5);
                } else {
                    // Classes shift intensity slightly so multi-class maps are separable by appearance too.
                    const double shift = 0.05 * double(l - 1) * sign;
                    v = base + sign * delta + shift + tint_fg[c] + 2.0 * cfg.noise_amplitude * (fg_noise[p] - 0.5);
                }
                v = std::clamp(v, 0.0, 1.0);
                img[c * P + p] = v;
                (l == 0 ? sum_bg : sum_fg) += v;
            }
        if (frac < kMinForegroundFraction || frac > kMaxForegroundFraction) continue;
        const double contrast = std::abs(sum_fg / double(3 * fg) - sum_bg / double(3 * (P - fg)));
        if (contrast < kMinContrast) continue;
        return SegSample{Tensor({3, S, S}, std::move(img)), std::move(labels), cfg.num_classes, id};
    }
    throw std::runtime_error("generate_sample: no admissible draw for sample " + std::to_string(id));
}

/// All samples of one split, generated once.
class SplitData {
public:
    SplitData(DataConfig cfg, Split split) : cfg_(std::move(cfg)), split_(split) {
        const std::size_t n = cfg_.split_size(split_);
        samples_.reserve(n);
        for (std::size_t i = 0; i < n; ++i) samples_.push_back(generate_sample(cfg_, split_, i));
    }

    const DataConfig& config() const { return cfg_; }
    Split split() const { return split_; }
    std::size_t size() const { return samples_.size(); }
    const SegSample& operator[](std::size_t i) const { return samples_.at(i); }

private:
    DataConfig cfg_;
    Split split_;
    std::vector<SegSample> samples_;
};

struct Batch {
    Tensor images;                     // [B x 3 x S x S]
    std::vector<std::uint8_t> labels;  // B*S*S
    std::vector<std::size_t> indices;
    std::vector<bool> flipped;

    std::size_t size() const { return indices.size(); }
};

inline void flip_horizontal(std::span<double> plane, std::size_t S) {
    for (std::size_t y = 0; y < S; ++y) std::reverse(plane.begin() + y * S, plane.begin() + (y + 1) * S);
}

inline Batch make_batch(const SplitData& data, std::span<const std::size_t> indices, const std::vector<bool>& flips) {
    const std::size_t S = data.config().image_size, P = S * S;
    Batch b;
    std::vector<double> img;
    img.reserve(indices.size() * 3 * P);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const SegSample& s = data[indices[k]];
        const std::size_t off = img.size();
        img.insert(img.end(), s.image.data().begin(), s.image.data().end());
        const std::size_t loff = b.labels.size();
        b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
        if (flips[k]) {
            for (std::size_t c = 0; c < 3; ++c) flip_horizontal(std::span<double>(img).subspan(off + c * P, P), S);
            for (std::size_t y = 0; y < S; ++y)
                std::reverse(b.labels.begin() + loff + y * S, b.labels.begin() + loff + (y + 1) * S);
        }
        b.indices.push_back(indices[k]);
        b.flipped.push_back(flips[k]);
    }
    b.images = Tensor({indices.size(), 3, S, S}, std::move(img));
    return b;
}

/// One epoch of batches: seeded shuffle; horizontal flips (p = 0.5) on the train split only.
inline std::vector<Batch> iterate_split(const SplitData& data, std::size_t batch, std::uint64_t epoch_seed,
                                        bool flip_augment = true) {
    if (batch == 0) throw std::invalid_argument("iterate_split: batch must be >= 1");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed({epoch_seed, static_cast<std::uint64_t>(data.split())}));
    std::shuffle(order.begin(), order.end(), rng);
    const bool augment = flip_augment && data.split() == Split::Train;
    std::bernoulli_distribution coin(0.5);
    std::vector<bool> flips(order.size(), false);
    if (augment) {
        for (std::size_t i = 0; i < flips.size(); ++i) flips[i] = coin(rng);
    }
    std::vector<Batch> out;
    for (std::size_t s = 0; s < order.size(); s += batch) {
        const std::size_t e = std::min(order.size(), s + batch);
        std::vector<bool> f(flips.begin() + s, flips.begin() + e);
        out.push_back(make_batch(data, std::span<const std::size_t>(order).subspan(s, e - s), f));
    }
    return out;
}

}  // namespace naslora
