// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace naslora;
using namespace naslora::testing;

TEST(BceLoss, HalfEverywhereIsLn2) {
    const Tensor p = Tensor::full({3, 7}, 0.5);
    Rng rng(1);
    std::vector<double> y(21);
    for (double& v : y) v = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
    EXPECT_NEAR(bce_loss(p, Tensor({3, 7}, y)).item(), std::log(2.0), 1e-15);
}

TEST(BceLoss, PerfectPredictionNearZero) {
    const Tensor y({4}, {0.0, 1.0, 1.0, 0.0});
    EXPECT_LE(bce_loss(y, y).item(), -std::log(1.0 - 1e-7) * 1.0001);
}

TEST(BceLoss, MatchesElementwiseOracle) {
    Rng rng(2);
    const Tensor p = rand_uniform({50}, rng, 0.01, 0.99);
    std::vector<double> y(50);
    for (double& v : y) v = std::bernoulli_distribution(0.3)(rng) ? 1.0 : 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < 50; ++i) s += -(y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]));
    EXPECT_NEAR(bce_loss(p, Tensor({50}, y)).item(), s / 50.0, 1e-14);
    EXPECT_THROW(bce_loss(p, Tensor::zeros({49})), ShapeError);
}

TEST(BceLoss, GradCheck) {
    Rng rng(3);
    const Tensor y({12}, {1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1});
    EXPECT_LE(grad_check([&](const Tensor& p) { return bce_loss(p, y); }, rand_uniform({12}, rng, 0.05, 0.95)), 1e-7);
}

TEST(DiceLoss, ClosedForms) {
    const Tensor ones = Tensor::full({10}, 1.0), zeros = Tensor::zeros({10});
    EXPECT_NEAR(dice_loss(ones, ones).item(), 0.0, 1e-12);
    EXPECT_EQ(dice_loss(zeros, zeros).item(), 0.0);
    const Tensor a({4}, {1, 1, 0, 0}), b({4}, {0, 0, 1, 1});
    EXPECT_NEAR(dice_loss(a, b).item(), 1.0, 1e-6);
    EXPECT_THROW(dice_loss(a, ones), ShapeError);
}

TEST(DiceLoss, GradCheck) {
    Rng rng(4);
    const Tensor y({9}, {1, 1, 0, 0, 1, 0, 1, 0, 0});
    EXPECT_LE(grad_check([&](const Tensor& p) { return dice_loss(p, y); }, rand_uniform({9}, rng, 0.0, 1.0)), 1e-7);
}

TEST(CrossEntropy, ClosedFormsAndOracle) {
    EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 3, 4}), {0, 1, 2, 3, 0, 1}).item(), std::log(4.0), 1e-15);
    Tensor sat({2, 3}, {1e3, 0, 0, 0, 0, 1e3});
    EXPECT_NEAR(cross_entropy(sat, {0, 2}).item(), 0.0, 1e-12);
    Rng rng(5);
    const Tensor z = randn({5, 4}, rng, 2.0);
    const std::vector<std::size_t> t = {3, 0, 1, 1, 2};
    double s = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
        double zsum = 0.0;
        for (std::size_t c = 0; c < 4; ++c) zsum += std::exp(z[r * 4 + c]);
        s += std::log(zsum) - z[r * 4 + t[r]];
    }
    EXPECT_NEAR(cross_entropy(z, t).item(), s / 5.0, 1e-14);
    EXPECT_THROW(cross_entropy(z, {0, 0, 0, 0, 4}), std::out_of_range);
    EXPECT_THROW(cross_entropy(z, {0, 0}), ShapeError);
    EXPECT_LE(grad_check([&](const Tensor& x) { return cross_entropy(x, t); }, z), 1e-7);
}

TEST(TotalLoss, WeightedSum) {
    const Tensor l = total_loss(Tensor::scalar(0.3), Tensor::scalar(0.2), Tensor::scalar(0.1));
    EXPECT_NEAR(l.item(), 0.7, 1e-15);
    EXPECT_NEAR(total_loss(Tensor::scalar(0.3), Tensor::scalar(0.2), Tensor::scalar(5.0), {1.0, 0.0}).item(), 0.5, 1e-15);
}

TEST(TotalLoss, GradientIsWeightedSumOfComponents) {
    Rng rng(6);
    const Tensor y({6}, {1, 0, 1, 0, 0, 1});
    const std::vector<std::size_t> t = {1, 0};
    const Tensor x0 = randn({6}, rng);
    auto parts = [&](const Tensor& x, int which) {
        const Tensor p = sigmoid(x);
        const Tensor logits = select_rows(reshape(x, {3, 2}), {0, 1});
        if (which == 0) return bce_loss(p, y);
        if (which == 1) return dice_loss(p, y);
        if (which == 2) return cross_entropy(logits, t);
        return total_loss(bce_loss(p, y), dice_loss(p, y), cross_entropy(logits, t), {1.5, 2.0});
    };
    auto grad_of = [&](int which) {
        Tensor x = x0.clone(true);
        GradTape tape;
        GradTape::Scope scope(tape);
        tape.backward(parts(x, which));
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    const auto gb = grad_of(0), gd = grad_of(1), gc = grad_of(2), gt = grad_of(3);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(gt[i], 1.5 * (gb[i] + gd[i]) + 2.0 * gc[i], 1e-13);
    EXPECT_LE(grad_check([&](const Tensor& x) { return parts(x, 3); }, x0), 1e-7);
}

TEST(AdamW, FirstStepMagnitudeIsLr) {
    Tensor p = Tensor::full({1}, 2.0, true);
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
    p.impl()->grad_buffer()[0] = 1.0;
    opt.step();
    EXPECT_NEAR(p[0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
    Rng rng(7);
    Tensor p = randn({5}, rng, 1.0, true);
    const Tensor before = p.clone(false);
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
    for (int i = 0; i < 3; ++i) opt.step();
    EXPECT_TRUE(bitwise_equal(p, before));
    EXPECT_EQ(opt.steps(), 3u);
}

TEST(AdamW, DecayOnlyStepShrinks) {
    Rng rng(8);
    Tensor p = randn({5}, rng, 1.0, true);
    const Tensor before = p.clone(false);
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.01});
    opt.step();
    for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(p[i], before[i] * (1.0 - 0.1 * 0.01));
}

TEST(AdamW, MatchesHandRolledSequence) {
    Tensor p = Tensor::full({1}, 1.0, true);
    AdamW opt({p}, {.lr = 0.05, .weight_decay = 0.1});
    double x = 1.0, m = 0.0, v = 0.0;
    const std::vector<double> grads = {0.5, -1.0, 2.0, 0.0, 0.25};
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        p.zero_grad();
        p.impl()->grad_buffer()[0] = grads[t - 1];
        opt.step();
        x -= 0.05 * 0.1 * x;
        m = 0.9 * m + 0.1 * grads[t - 1];
        v = 0.999 * v + 0.001 * grads[t - 1] * grads[t - 1];
        x -= 0.05 * (m / (1 - std::pow(0.9, double(t)))) / (std::sqrt(v / (1 - std::pow(0.999, double(t)))) + 1e-8);
        EXPECT_NEAR(p[0], x, 1e-15);
    }
    EXPECT_EQ(opt.first_moments()[0].shape(), p.shape());
}

TEST(AdamW, NanGradientAborts) {
    Tensor p = Tensor::full({2}, 1.0, true);
    AdamW opt({p}, {});
    p.impl()->grad_buffer()[1] = std::nan("");
    EXPECT_THROW(opt.step(), NumericError);
    EXPECT_EQ(opt.steps(), 0u);
}

TEST(Matching, GreedyHighestIouAndTies) {
    // Two queries, one foreground class: query 1 covers the object.
    const std::size_t S = 4, P = 16;
    std::vector<double> logits(2 * P, -10.0);
    std::vector<std::uint8_t> labels(P, 0);
    for (std::size_t p = 0; p < 4; ++p) {
        labels[p] = 1;
        logits[P + p] = 10.0;
    }
    QueryTargets t = match_queries(Tensor({1, 2, S, S}, logits), labels, 1);
    EXPECT_EQ(t[0], (std::vector<std::size_t>{1, 0}));
    // Identical queries: lowest index wins.
    t = match_queries(Tensor::zeros({1, 3, S, S}), labels, 1);
    EXPECT_EQ(t[0], (std::vector<std::size_t>{0, 1, 1}));
    // No foreground: every query is "no object".
    t = match_queries(Tensor::zeros({1, 3, S, S}), std::vector<std::uint8_t>(P, 0), 2);
    EXPECT_EQ(t[0], (std::vector<std::size_t>{2, 2, 2}));
    std::vector<double> bad(3 * P, 0.0);
    bad[5] = std::nan("");
    EXPECT_THROW(match_queries(Tensor({1, 3, S, S}, bad), labels, 1), NumericError);
}

TEST(Matching, EachClassClaimsDistinctQuery) {
    Rng rng(10);
    const std::size_t S = 8, P = 64, M = 4, K = 3;
    const Tensor logits = randn({2, M, S, S}, rng, 2.0);
    std::vector<std::uint8_t> labels(2 * P);
    for (auto& l : labels) l = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 3)(rng));
    const QueryTargets t = match_queries(logits, labels, K);
    for (const auto& row : t) {
        std::vector<int> seen(K + 1, 0);
        for (std::size_t v : row) seen[v]++;
        for (std::size_t c = 0; c < K; ++c) EXPECT_EQ(seen[c], 1);
        EXPECT_EQ(seen[K], int(M - K));
    }
}

TEST(SegmentationLoss, MatchesComponentOracle) {
    SegModel model(small_model(AdapterVariant::LoRA, 2), 3);
    const SplitData data(small_data(2), Split::Train);
    const Batch b = first_batch(data, 2);
    GradTape::Pause pause;
    const ModelOutput out = model.forward(b.images);
    const LossParts parts = segmentation_loss(out, b.labels, 2, {1.0, 2.0});
    EXPECT_NEAR(parts.total.item(), parts.bce + parts.dice + 2.0 * parts.cls, 1e-13);
    const QueryTargets t = match_queries(out.mask_logits, b.labels, 2);
    std::vector<std::size_t> flat;
    for (const auto& r : t) flat.insert(flat.end(), r.begin(), r.end());
    EXPECT_NEAR(parts.cls, cross_entropy(out.class_logits, flat).item(), 1e-14);
    std::size_t matched = 0;
    for (std::size_t v : flat) matched += v != 2;
    EXPECT_EQ(parts.matched, matched);
}

namespace {

struct TinyRun {
    ModelConfig model = small_model();
    DataConfig data = small_data(1, 8, 4);
    TrainConfig train;

    TinyRun(std::size_t T, std::size_t TB) {
        train.epochs = T;
        train.warmup = TB;
        train.lr_w = 1e-3;
        train.lr_alpha = 1e-2;
    }
};

}  // namespace

TEST(StageWise, ChecksumDiscipline) {
    TinyRun run(4, 2);
    SegModel model(run.model, 7);
    const SplitData tr(run.data, Split::Train), va(run.data, Split::Val);
    const std::uint64_t frozen0 = checksum(model.frozen_group());
    const TrainHistory h = stage_wise_train(model, tr, va, run.train);
    ASSERT_EQ(h.size(), 4u);
    for (const EpochRecord& r : h) {
        EXPECT_TRUE(r.stage1);
        EXPECT_EQ(r.alpha_before_s1, r.alpha_after_s1) << r.epoch;
        EXPECT_EQ(r.w_before_s2, r.w_after_s2) << r.epoch;
        EXPECT_EQ(r.frozen, frozen0);
        EXPECT_EQ(r.stage2, r.epoch > 2);
        if (r.epoch <= 2) EXPECT_EQ(r.alpha_after_s2, r.alpha_after_s1);
        else EXPECT_NE(r.alpha_after_s2, r.alpha_after_s1);
        EXPECT_TRUE(std::isfinite(r.loss));
        EXPECT_EQ(r.cell_blend.size(), model.cells().size());
    }
}

TEST(StageWise, WarmupCoveringAllEpochsKeepsAlphaBitwise) {
    TinyRun run(3, 3);
    SegModel model(run.model, 7);
    std::vector<Tensor> alpha0;
    for (const Tensor& a : model.alpha_group()) alpha0.push_back(a.clone(false));
    std::vector<Tensor> blend0;
    for (const NasCell* c : model.cells()) {
        GradTape::Pause pause;
        blend0.push_back(c->blend());
    }
    const SplitData tr(run.data, Split::Train), va(run.data, Split::Val);
    const TrainHistory h = stage_wise_train(model, tr, va, run.train);
    for (std::size_t i = 0; i < alpha0.size(); ++i) EXPECT_TRUE(bitwise_equal(model.alpha_group()[i], alpha0[i]));
    for (const EpochRecord& r : h) EXPECT_FALSE(r.stage2);
    for (std::size_t i = 0; i < blend0.size(); ++i)
        for (std::size_t k = 0; k < kNumCandidateOps; ++k) EXPECT_EQ(h.back().cell_blend[i][k], blend0[i][k]);
}

TEST(StageWise, ZeroWarmupTrainsAlphaFromFirstEpoch) {
    TinyRun run(1, 0);
    SegModel model(run.model, 7);
    const SplitData tr(run.data, Split::Train), va(run.data, Split::Val);
    const TrainHistory h = stage_wise_train(model, tr, va, run.train);
    EXPECT_TRUE(h[0].stage2);
    EXPECT_NE(h[0].alpha_after_s2, h[0].alpha_before_s1);
}

TEST(StageWise, DecoderOnlySkipsStageTwo) {
    TinyRun run(2, 0);
    run.model.variant = AdapterVariant::None;
    SegModel model(run.model, 7);
    const SplitData tr(run.data, Split::Train), va(run.data, Split::Val);
    for (const EpochRecord& r : stage_wise_train(model, tr, va, run.train)) EXPECT_FALSE(r.stage2);
}

TEST(StageWise, RunsAreBitwiseReproducible) {
    TinyRun run(2, 1);
    const SplitData tr(run.data, Split::Train), va(run.data, Split::Val);
    SegModel a(run.model, 7), b(run.model, 7);
    const TrainHistory ha = stage_wise_train(a, tr, va, run.train);
    const TrainHistory hb = stage_wise_train(b, tr, va, run.train);
    for (std::size_t i = 0; i < ha.size(); ++i) {
        EXPECT_EQ(ha[i].loss, hb[i].loss);
        EXPECT_EQ(ha[i].val_iou, hb[i].val_iou);
        EXPECT_EQ(ha[i].alpha_after_s2, hb[i].alpha_after_s2);
        EXPECT_EQ(ha[i].w_after_s2, hb[i].w_after_s2);
    }
}

TEST(StageWise, InvalidWarmupRejected) {
    TinyRun run(2, 3);
    SegModel model(run.model, 7);
    EXPECT_THROW(Trainer(model, run.train), std::invalid_argument);
}

TEST(StageWise, DivergenceReportsEpoch) {
    TinyRun run(2, 0);
    SegModel model(run.model, 7);
    const SplitData tr(run.data, Split::Train), va(run.data, Split::Val);
    Trainer trainer(model, run.train);
    trainer.run_epoch(tr, va);
    // Poison a decoder weight: the next forward produces a non-finite loss.
    model.weight_group().back().mutable_data()[0] = std::nan("");
    try {
        trainer.run_epoch(tr, va);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.epoch(), 2u);
    }
}

TEST(Evaluate, PerfectAndAggregate) {
    const SplitData va(small_data(1, 8, 4), Split::Val);
    const SegModel model(small_model(), 7);
    const Metrics m = evaluate(model, va, 3);
    const Metrics m1 = evaluate(model, va, 8);
    EXPECT_EQ(m.fg_iou, m1.fg_iou);
    EXPECT_GE(m.fg_iou, 0.0);
    EXPECT_LE(m.fg_iou, m.fg_dice + 1e-15);
}
