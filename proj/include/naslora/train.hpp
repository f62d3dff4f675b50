// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <limits>

#include "naslora/losses.hpp"
#include "naslora/metrics.hpp"
#include "naslora/model.hpp"
#include "naslora/optim.hpp"
#include "naslora/synth_data.hpp"

namespace naslora {

struct TrainConfig {
    /// Total epochs T and architecture warm-up T_B.
    std::size_t epochs = 40;
    std::size_t warmup = 10;
    double lr_w = 1e-4;
    double wd_w = 1e-4;
    double lr_alpha = 1e-3;
    double wd_alpha = 1e-3;
    LossWeights loss;
    std::size_t batch = 4;
    bool flip_augment = true;
    std::uint64_t seed = 7;

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
        if (epochs == 0) fail("epochs must be >= 1");
        if (warmup > epochs) fail("warmup must satisfy 0 <= T_B <= T");
        if (batch == 0) fail("batch must be >= 1");
        for (double v : {lr_w, wd_w, lr_alpha, wd_alpha, loss.seg, loss.cls}) {
            if (!(v >= 0.0) || !std::isfinite(v)) fail("learning rates, decays and loss weights must be finite and >= 0");
        }
    }
};

/// Raised when the loss or a gradient turns non-finite; carries the offending epoch.
class DivergenceError : public NumericError {
public:
    DivergenceError(std::size_t epoch, const std::string& what)
        : NumericError("diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
    std::size_t epoch() const { return epoch_; }

private:
    std::size_t epoch_;
};

/// Per-sample query assignment: entry m is the classification target of query m
/// (foreground class c -> index c-1, unmatched -> K).
using QueryTargets = std::vector<std::vector<std::size_t>>;

/// Greedy soft-IoU matching: foreground classes present in a sample, in ascending order,
/// each claim their best unassigned query; ties go to the lowest query index.
inline QueryTargets match_queries(const Tensor& mask_logits, std::span<const std::uint8_t> labels, std::size_t K) {
    const std::size_t B = mask_logits.dim(0), M = mask_logits.dim(1), P = mask_logits.dim(2) * mask_logits.dim(3);
    if (labels.size() != B * P) throw ShapeError("match_queries: label map size disagrees with mask logits");
    const auto ml = mask_logits.data();
    QueryTargets out(B, std::vector<std::size_t>(M, K));
    std::vector<double> prob(M * P);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < M * P; ++i) {
            const double z = ml[b * M * P + i];
            // A NaN would fail every IoU comparison and silently leave all queries unmatched.
            if (!std::isfinite(z)) throw NumericError("match_queries: non-finite mask logit");
            prob[i] = 1.0 / (1.0 + std::exp(-z));
        }
        const std::uint8_t* lab = labels.data() + b * P;
        std::vector<bool> taken(M, false);
        for (std::size_t c = 1; c <= K; ++c) {
            std::size_t area = 0;
            for (std::size_t p = 0; p < P; ++p) area += lab[p] == c;
            if (area == 0) continue;
            std::size_t best = M;
            double best_iou = -1.0;
            for (std::size_t m = 0; m < M; ++m) {
                if (taken[m]) continue;
                double inter = 0.0, psum = 0.0;
                const double* pr = prob.data() + m * P;
                for (std::size_t p = 0; p < P; ++p) {
                    psum += pr[p];
                    if (lab[p] == c) inter += pr[p];
                }
                const double iou = inter / (psum + double(area) - inter);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = m;
                }
            }
            if (best == M) break;  // more classes than queries
            taken[best] = true;
            out[b][best] = c - 1;
        }
    }
    return out;
}

struct LossParts {
    Tensor total;
    double bce = 0.0, dice = 0.0, cls = 0.0;
    std::size_t matched = 0;
};

/// Matched BCE + Dice (mean over matched pairs) and cross-entropy over all queries.
inline LossParts segmentation_loss(const ModelOutput& out, std::span<const std::uint8_t> labels, std::size_t K,
                                   LossWeights w) {
    const std::size_t B = out.mask_logits.dim(0), M = out.mask_logits.dim(1);
    const std::size_t P = out.mask_logits.dim(2) * out.mask_logits.dim(3);
    QueryTargets targets;
    {
        GradTape::Pause pause;
        targets = match_queries(out.mask_logits, labels, K);
    }
    std::vector<std::size_t> rows, cls_targets;
    std::vector<double> tgt;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) {
            const std::size_t t = targets[b][m];
            cls_targets.push_back(t);
            if (t == K) continue;
            rows.push_back(b * M + m);
            for (std::size_t p = 0; p < P; ++p) tgt.push_back(labels[b * P + p] == t + 1 ? 1.0 : 0.0);
        }
    LossParts parts;
    Tensor bce = Tensor::scalar(0.0), dice = Tensor::scalar(0.0);
    if (!rows.empty()) {
        const std::size_t n = rows.size();
        Tensor probs = sigmoid(select_rows(reshape(out.mask_logits, {B * M, P}), rows));
        Tensor target({n, P}, std::move(tgt));
        bce = bce_loss(probs, target);
        Tensor acc;
        for (std::size_t i = 0; i < n; ++i) {
            Tensor d = dice_loss(select_rows(probs, {i}), select_rows(target, {i}));
            acc = acc.defined() ? add(acc, d) : d;
        }
        dice = scale(acc, 1.0 / static_cast<double>(n));
    }
    Tensor cls = cross_entropy(out.class_logits, cls_targets);
    parts.bce = bce.item();
    parts.dice = dice.item();
    parts.cls = cls.item();
    parts.matched = rows.size();
    parts.total = total_loss(bce, dice, cls, w);
    return parts;
}

/// Dataset-level metrics from aggregated confusion counts.
inline Metrics evaluate(const SegModel& model, const SplitData& data, std::size_t batch = 8) {
    GradTape::Pause pause;
    const std::size_t K = model.config().num_classes;
    ConfusionCounts cc(K);
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t s = 0; s < idx.size(); s += batch) {
        const std::size_t e = std::min(idx.size(), s + batch);
        const Batch b = make_batch(data, std::span<const std::size_t>(idx).subspan(s, e - s), std::vector<bool>(e - s, false));
        const ModelOutput out = model.forward(b.images);
        const SemanticResult sem = semantic_inference(out.mask_logits, out.class_logits);
        cc.add(sem.labels, b.labels);
    }
    return metrics_from_counts(cc);
}

struct EpochRecord {
    std::size_t epoch = 0;
    bool stage1 = false, stage2 = false;
    double loss = 0.0;        // mean stage-1 loss
    double alpha_loss = std::numeric_limits<double>::quiet_NaN();  // mean stage-2 loss
    double val_iou = 0.0, val_dice = 0.0;
    std::array<double, kNumCandidateOps> mean_blend{};
    std::vector<std::array<double, kNumCandidateOps>> cell_blend;
    std::uint64_t alpha_before_s1 = 0, alpha_after_s1 = 0;
    std::uint64_t w_before_s2 = 0, w_after_s2 = 0;
    std::uint64_t alpha_after_s2 = 0;
    std::uint64_t frozen = 0;
};

using TrainHistory = std::vector<EpochRecord>;

inline void set_requires_grad(const std::vector<Tensor>& group, bool on) {
    for (Tensor t : group) t.set_requires_grad(on);
}

/// Alternating optimization: each epoch t runs a weight pass with alpha fixed, then, when
/// t > T_B, an architecture pass with the weights fixed. Two independent optimizer states.
class Trainer {
public:
    Trainer(SegModel& model, TrainConfig cfg)
        : model_(model),
          cfg_(cfg),
          opt_w_(model.weight_group(), AdamWConfig{.lr = cfg.lr_w, .weight_decay = cfg.wd_w}),
          opt_a_(model.alpha_group(), AdamWConfig{.lr = cfg.lr_alpha, .weight_decay = cfg.wd_alpha}) {
        cfg_.validate();
    }

    const TrainConfig& config() const { return cfg_; }
    std::size_t epoch() const { return epoch_; }
    void set_epoch(std::size_t e) { epoch_ = e; }
    AdamW& weight_optimizer() { return opt_w_; }
    AdamW& alpha_optimizer() { return opt_a_; }
    bool done() const { return epoch_ >= cfg_.epochs; }

    EpochRecord run_epoch(const SplitData& train, const SplitData& val) {
        const std::size_t t = ++epoch_;
        const std::size_t K = model_.config().num_classes;
        const std::vector<Tensor> wg = model_.weight_group(), ag = model_.alpha_group();
        EpochRecord rec;
        rec.epoch = t;
        rec.alpha_before_s1 = checksum(ag);

        rec.stage1 = true;
        set_requires_grad(ag, false);
        set_requires_grad(wg, true);
        rec.loss = pass(train, opt_w_, derive_seed({cfg_.seed, 0xE1, t}), K, t);
        rec.alpha_after_s1 = checksum(ag);

        rec.w_before_s2 = checksum(wg);
        if (t > cfg_.warmup && !ag.empty()) {
            rec.stage2 = true;
            set_requires_grad(wg, false);
            set_requires_grad(ag, true);
            rec.alpha_loss = pass(train, opt_a_, derive_seed({cfg_.seed, 0xE2, t}), K, t);
        }
        rec.w_after_s2 = checksum(wg);
        rec.alpha_after_s2 = checksum(ag);
        set_requires_grad(wg, true);
        set_requires_grad(ag, true);
        rec.frozen = checksum(model_.frozen_group());

        const Metrics m = evaluate(model_, val);
        rec.val_iou = m.fg_iou;
        rec.val_dice = m.fg_dice;
        const auto cells = model_.cells();
        if (!cells.empty()) {
            const Tensor prop = op_proportions(cells);
            for (std::size_t i = 0; i < kNumCandidateOps; ++i) rec.mean_blend[i] = prop[i];
            for (const NasCell* c : cells) {
                GradTape::Pause pause;
                const Tensor w = c->blend();
                std::array<double, kNumCandidateOps> a{};
                for (std::size_t i = 0; i < kNumCandidateOps; ++i) a[i] = w[i];
                rec.cell_blend.push_back(a);
            }
        }
        return rec;
    }

private:
    double pass(const SplitData& train, AdamW& opt, std::uint64_t seed, std::size_t K, std::size_t t) {
        double total = 0.0;
        std::size_t n = 0;
        for (const Batch& b : iterate_split(train, cfg_.batch, seed, cfg_.flip_augment)) {
            GradTape tape;
            try {
                GradTape::Scope scope(tape);
                const ModelOutput out = model_.forward(b.images);
                const LossParts loss = segmentation_loss(out, b.labels, K, cfg_.loss);
                const double v = loss.total.item();
                if (!std::isfinite(v)) throw NumericError("loss is " + std::to_string(v));
                tape.backward(loss.total);
                total += v;
                ++n;
            } catch (const DivergenceError&) {
                throw;
            } catch (const NumericError& e) {
                throw DivergenceError(t, e.what());
            }
            try {
                opt.step();
            } catch (const NumericError& e) {
                throw DivergenceError(t, e.what());
            }
            opt.zero_grad();
            // Adjoints that reached the other group are discarded.
            for (Tensor p : model_.alpha_group()) p.zero_grad();
            for (Tensor p : model_.weight_group()) p.zero_grad();
        }
        return total / static_cast<double>(std::max<std::size_t>(n, 1));
    }

    SegModel& model_;
    TrainConfig cfg_;
    AdamW opt_w_, opt_a_;
    std::size_t epoch_ = 0;
};

/// Runs epochs until T; `on_epoch` sees each record as it completes.
inline TrainHistory stage_wise_train(SegModel& model, const SplitData& train, const SplitData& val, const TrainConfig& cfg,
                                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    Trainer trainer(model, cfg);
    TrainHistory history;
    while (!trainer.done()) {
        history.push_back(trainer.run_epoch(train, val));
        if (on_epoch) on_epoch(history.back());
    }
    return history;
}

}  // namespace naslora
