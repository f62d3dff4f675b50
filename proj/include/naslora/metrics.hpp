// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace naslora {

struct ClassCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// Per-class one-vs-rest counts over classes 0..K plus foreground-vs-background counts.
struct ConfusionCounts {
    std::size_t num_classes = 1;
    std::vector<ClassCounts> per_class;
    ClassCounts foreground;
    std::uint64_t correct = 0, pixels = 0;

    explicit ConfusionCounts(std::size_t K = 1) : num_classes(K), per_class(K + 1) {}

    void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
        if (pred.size() != truth.size()) throw std::invalid_argument("confusion counts: label maps differ in size");
        const std::size_t K = num_classes;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const std::size_t p = pred[i], t = truth[i];
            if (p > K || t > K) {
                throw std::out_of_range("confusion counts: label " + std::to_string(std::max(p, t)) + " exceeds K = " +
                                        std::to_string(K));
            }
            for (std::size_t c = 0; c <= K; ++c) {
                const bool pc = p == c, tc = t == c;
                ClassCounts& cc = per_class[c];
                cc.tp += pc && tc;
                cc.fp += pc && !tc;
                cc.fn += !pc && tc;
                cc.tn += !pc && !tc;
            }
            const bool pf = p > 0, tf = t > 0;
            foreground.tp += pf && tf;
            foreground.fp += pf && !tf;
            foreground.fn += !pf && tf;
            foreground.tn += !pf && !tf;
            correct += p == t;
            ++pixels;
        }
    }
};

struct Metrics {
    std::vector<double> iou;          // classes 0..K
    std::vector<double> dice;
    std::vector<bool> empty;          // class absent from both prediction and truth
    double miou = 0.0;                // mean over classes 0..K
    double fg_iou = 0.0;              // mean over classes 1..K
    double fg_dice = 0.0;
    double accuracy = 0.0;
    double ber = 0.0;                 // percent, foreground vs background
};

inline Metrics metrics_from_counts(const ConfusionCounts& cc) {
    Metrics m;
    const std::size_t K = cc.num_classes;
    for (std::size_t c = 0; c <= K; ++c) {
        const ClassCounts& k = cc.per_class[c];
        const bool empty = k.tp + k.fp + k.fn == 0;
        m.empty.push_back(empty);
        m.iou.push_back(empty ? 1.0 : double(k.tp) / double(k.tp + k.fp + k.fn));
        m.dice.push_back(empty ? 1.0 : 2.0 * double(k.tp) / double(2 * k.tp + k.fp + k.fn));
        m.miou += m.iou.back() / double(K + 1);
        if (c > 0) {
            m.fg_iou += m.iou.back() / double(K);
            m.fg_dice += m.dice.back() / double(K);
        }
    }
    m.accuracy = cc.pixels ? double(cc.correct) / double(cc.pixels) : 1.0;
    const ClassCounts& f = cc.foreground;
    // A rate with an empty denominator admits no errors and counts as 1.
    const double tpr = f.tp + f.fn ? double(f.tp) / double(f.tp + f.fn) : 1.0;
    const double tnr = f.tn + f.fp ? double(f.tn) / double(f.tn + f.fp) : 1.0;
    m.ber = 100.0 * (1.0 - 0.5 * (tpr + tnr));
    return m;
}

inline Metrics compute_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::size_t K) {
    ConfusionCounts cc(K);
    cc.add(pred, truth);
    return metrics_from_counts(cc);
}

}  // namespace naslora
