// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "naslora/ops.hpp"

namespace naslora {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1e-6;

namespace detail {

/// Neumaier-compensated running sum; keeps loss reductions over many pixels at a few ulps.
struct CompensatedSum {
    double sum = 0.0, carry = 0.0;

    void add(double v) {
        const double t = sum + v;
        carry += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
        sum = t;
    }
    double value() const { return sum + carry; }
};

}  // namespace detail

/// Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].
/// Clamped entries carry zero gradient.
inline Tensor bce_loss(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "bce_loss");
    const std::size_t n = pred.numel();
    const auto p = pred.data();
    const auto y = target.data();
    detail::CompensatedSum s;
    for (std::size_t i = 0; i < n; ++i) {
        const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
        s.add(y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q));
    }
    return detail::make_result({1}, {-s.value() / static_cast<double>(n)}, {&pred, &target},
                               [pred, target, n](std::span<const double> g) {
                                   const auto p = pred.data();
                                   const auto y = target.data();
                                   const double scale = g[0] / static_cast<double>(n);
                                   if (pred.requires_grad()) {
                                       auto gp = pred.impl()->grad_buffer();
                                       for (std::size_t i = 0; i < n; ++i) {
                                           if (p[i] < kProbClamp || p[i] > 1.0 - kProbClamp) continue;
                                           gp[i] += scale * (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i]));
                                       }
                                   }
                                   if (target.requires_grad()) {
                                       auto gt = target.impl()->grad_buffer();
                                       for (std::size_t i = 0; i < n; ++i) {
                                           const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
                                           gt[i] += -scale * (std::log(q) - std::log(1.0 - q));
                                       }
                                   }
                               });
}

/// 1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps).
inline Tensor dice_loss(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "dice_loss");
    const auto p = pred.data();
    const auto y = target.data();
    detail::CompensatedSum inter, denom;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter.add(y[i] * p[i]);
        denom.add(y[i] * y[i] + p[i] * p[i]);
    }
    const double num = 2.0 * inter.value() + kDiceSmooth;
    const double den = denom.value() + kDiceSmooth;
    return detail::make_result({1}, {1.0 - num / den}, {&pred, &target}, [pred, target, num, den](std::span<const double> g) {
        const auto p = pred.data();
        const auto y = target.data();
        // d/dp_i [1 - N/D] = -(2 y_i D - N 2 p_i) / D^2
        const double inv_d2 = 1.0 / (den * den);
        if (pred.requires_grad()) {
            auto gp = pred.impl()->grad_buffer();
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += -g[0] * (2.0 * y[i] * den - num * 2.0 * p[i]) * inv_d2;
        }
        if (target.requires_grad()) {
            auto gt = target.impl()->grad_buffer();
            for (std::size_t i = 0; i < p.size(); ++i) gt[i] += -g[0] * (2.0 * p[i] * den - num * 2.0 * y[i]) * inv_d2;
        }
    });
}

/// Mean cross-entropy of logits[..., C] against integer targets, one per row.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
    const std::size_t C = logits.shape().back();
    const std::size_t rows = logits.numel() / C;
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                         " rows");
    }
    for (std::size_t t : targets) {
        if (t >= C) throw std::out_of_range("cross_entropy: label " + std::to_string(t) + " out of range");
    }
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    const double* z = logits.data().data();
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = z + r * C;
        const double mx = *std::max_element(row, row + C);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] = std::exp(row[c] - lse);
        loss += lse - row[targets[r]];
    }
    return detail::make_result({1}, {loss / static_cast<double>(rows)}, {&logits},
                               [logits, targets, probs, rows, C](std::span<const double> g) {
                                   auto gz = logits.impl()->grad_buffer();
                                   const double scale = g[0] / static_cast<double>(rows);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t c = 0; c < C; ++c) {
                                           const double ind = (c == targets[r]) ? 1.0 : 0.0;
                                           gz[r * C + c] += scale * ((*probs)[r * C + c] - ind);
                                       }
                                   }
                               });
}

struct LossWeights {
    double seg = 1.0;
    double cls = 2.0;
};

/// lambda_seg * (bce + dice) + lambda_cls * cls.
inline Tensor total_loss(const Tensor& bce, const Tensor& dice, const Tensor& cls, LossWeights w = {}) {
    return add(scale(add(bce, dice), w.seg), scale(cls, w.cls));
}

}  // namespace naslora
