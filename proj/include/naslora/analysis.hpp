// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "naslora/train.hpp"

namespace naslora {

struct AttentionReport {
    std::vector<double> per_layer;  // patch-index units
    std::size_t samples = 0;
};

/// Mean attention distance per encoder block over the first `max_samples` samples of a split.
inline AttentionReport attention_distance_report(const SegModel& model, const SplitData& data, std::size_t max_samples = 100,
                                                 std::size_t batch = 8) {
    GradTape::Pause pause;
    const std::size_t n = std::min(max_samples, data.size());
    const std::size_t G = model.config().grid();
    AttentionReport rep;
    rep.per_layer.assign(model.config().depth, 0.0);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t s = 0; s < n; s += batch) {
        const std::size_t e = std::min(n, s + batch);
        const Batch b = make_batch(data, std::span<const std::size_t>(idx).subspan(s, e - s), std::vector<bool>(e - s, false));
        const EncoderOutput enc = model.encode(b.images, true);
        for (std::size_t l = 0; l < enc.attention.size(); ++l) {
            rep.per_layer[l] += mean_attention_distance(enc.attention[l], G, G) * double(e - s);
        }
    }
    for (double& v : rep.per_layer) v /= double(std::max<std::size_t>(n, 1));
    rep.samples = n;
    return rep;
}

}  // namespace naslora
