// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "naslora/adapter.hpp"

using namespace naslora;

namespace {

constexpr std::size_t kIn = 12, kOut = 10, kRank = 3;

FrozenProjection make_frozen(std::uint64_t seed) {
    Rng rng(seed);
    return FrozenProjection{randn({kOut, kIn}, rng, 0.3)};
}

Adapter make_adapter(AdapterVariant v, std::uint64_t seed, double ratio = 2.0 / 3.0) {
    Rng rng(seed);
    Adapter a = Adapter::create(v, kIn, kOut, kRank, ratio, rng, seed + 100);
    // Non-zero W_d so the update path is exercised.
    Tensor wd = randn({kOut, kRank}, rng, 0.5);
    auto d = a.w_dec().mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = wd[i];
    return a;
}

void set_alpha(Adapter& a, const std::vector<double>& logits) {
    auto d = a.cell().alpha().mutable_data();
    for (std::size_t i = 0; i < kNumCandidateOps; ++i) d[i] = logits[i];
}

void suppress_maxpool(Adapter& a, std::uint64_t seed) {
    Rng rng(seed);
    Tensor r = randn({8}, rng);
    std::vector<double> logits(r.data().begin(), r.data().end());
    logits[op_index(CandidateOpKind::MaxPool3)] = -1e3;
    set_alpha(a, logits);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST(Adapter, ZeroDecoderMeansFrozenOutputForEveryVariant) {
    const FrozenProjection f = make_frozen(1);
    Rng rng(2);
    Tensor x = randn({2, kIn, 4, 4}, rng);
    const Tensor ref = f.forward(x);
    for (AdapterVariant v : {AdapterVariant::LoRA, AdapterVariant::NasLoRA, AdapterVariant::NasPcLoRA}) {
        Rng init(3);
        const Adapter a = Adapter::create(v, kIn, kOut, kRank, 2.0 / 3.0, init, 4);
        EXPECT_TRUE(bitwise_equal(adapter_forward(a, f, x), ref)) << variant_name(v);
    }
}

TEST(Adapter, ZeroEncoderMeansFrozenOutput) {
    const FrozenProjection f = make_frozen(1);
    Rng rng(2);
    Tensor x = randn({1, kIn, 3, 3}, rng);
    for (AdapterVariant v : {AdapterVariant::LoRA, AdapterVariant::NasLoRA, AdapterVariant::NasPcLoRA}) {
        Adapter a = make_adapter(v, 5);
        for (double& w : a.w_enc().mutable_data()) w = 0.0;
        const Tensor y = adapter_forward(a, f, x), ref = f.forward(x);
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-15) << variant_name(v);
    }
}

TEST(Adapter, OneHotSkipMatchesPlainLoRA) {
    const FrozenProjection f = make_frozen(7);
    Adapter nas = make_adapter(AdapterVariant::NasLoRA, 8);
    std::vector<double> logits(8, 0.0);
    logits[op_index(CandidateOpKind::Skip)] = 50.0;
    set_alpha(nas, logits);
    const Adapter lora = Adapter::from_parts(AdapterVariant::LoRA, nas.w_enc(), nas.w_dec(), std::nullopt);
    Rng rng(9);
    for (int t = 0; t < 10; ++t) {
        Tensor x = randn({1, kIn, 5, 5}, rng);
        EXPECT_LE(max_relative_error(adapter_forward(nas, f, x), adapter_forward(lora, f, x)), 1e-12);
    }
}

TEST(Adapter, RatioZeroIsBitwisePlainLoRA) {
    const FrozenProjection f = make_frozen(7);
    const Adapter pc = make_adapter(AdapterVariant::NasPcLoRA, 8, 0.0);
    const Adapter lora = Adapter::from_parts(AdapterVariant::LoRA, pc.w_enc(), pc.w_dec(), std::nullopt);
    Rng rng(9);
    Tensor x = randn({2, kIn, 5, 5}, rng);
    EXPECT_TRUE(bitwise_equal(adapter_forward(pc, f, x), adapter_forward(lora, f, x)));
}

TEST(Adapter, RankAndConsistencyChecks) {
    Rng rng(1);
    EXPECT_THROW(Adapter::create(AdapterVariant::LoRA, 12, 10, 5, 1.0, rng, 0), std::invalid_argument);
    EXPECT_THROW(Adapter::create(AdapterVariant::LoRA, 12, 10, 0, 1.0, rng, 0), std::invalid_argument);
    EXPECT_NO_THROW(Adapter::create(AdapterVariant::LoRA, 12, 10, 4, 1.0, rng, 0));
    EXPECT_THROW(Adapter::create(AdapterVariant::None, 12, 10, 3, 1.0, rng, 0), std::invalid_argument);
    const Adapter a = make_adapter(AdapterVariant::NasLoRA, 2);
    EXPECT_THROW(Adapter::from_parts(AdapterVariant::LoRA, a.w_enc(), a.w_dec(), a.cell()), std::invalid_argument);
    EXPECT_THROW(Adapter::from_parts(AdapterVariant::NasLoRA, a.w_enc(), a.w_dec(), std::nullopt),
                 std::invalid_argument);
    const FrozenProjection wrong{Tensor::zeros({kOut, kIn + 1})};
    EXPECT_THROW(adapter_forward(a, wrong, Tensor::zeros({1, kIn + 1, 2, 2})), ShapeError);
}

TEST(Adapter, InitialisationFollowsDeclaredScheme) {
    Rng rng(3);
    const Adapter a = Adapter::create(AdapterVariant::NasPcLoRA, kIn, kOut, kRank, 2.0 / 3.0, rng, 4);
    const double bound = 1.0 / std::sqrt(double(kIn));
    for (double v : a.w_enc().data()) EXPECT_LE(std::abs(v), bound);
    for (double v : a.w_dec().data()) EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(a.w_enc().requires_grad());
    EXPECT_TRUE(a.w_dec().requires_grad());
    EXPECT_TRUE(a.cell().alpha().requires_grad());
    EXPECT_EQ(a.cell().active_width(), 2u);
}

TEST(Adapter, TrainableCountFormula) {
    Rng rng(3);
    const Adapter lora = Adapter::create(AdapterVariant::LoRA, kIn, kOut, kRank, 1.0, rng, 1);
    EXPECT_EQ(lora.trainable_count(), kRank * kIn + kOut * kRank);

    for (double ratio : {1.0, 2.0 / 3.0}) {
        const std::size_t rp = static_cast<std::size_t>(std::llround(ratio * kRank));
        // sep3, sep5: r'k^2 + r'^2; dil3, dil5: r'^2 k^2; alpha: 8.
        const std::size_t ops = (rp * 9 + rp * rp) + (rp * 25 + rp * rp) + rp * rp * 9 + rp * rp * 25;
        const Adapter a = Adapter::create(ratio == 1.0 ? AdapterVariant::NasLoRA : AdapterVariant::NasPcLoRA, kIn, kOut,
                                          kRank, ratio, rng, 2);
        EXPECT_EQ(a.trainable_count(), kRank * kIn + kOut * kRank + 8 + ops);
        std::size_t n = a.cell().alpha().numel();
        for (const Tensor& t : a.weight_parameters()) n += t.numel();
        EXPECT_EQ(a.trainable_count(), n);
    }
}

TEST(Merge, DenseLoRAClosedForm) {
    const FrozenProjection f = make_frozen(11);
    const Adapter a = make_adapter(AdapterVariant::LoRA, 12);
    const MergedProjection m = merge(a, f);
    ASSERT_EQ(m.kind, MergedProjection::Kind::Dense);
    for (std::size_t o = 0; o < kOut; ++o)
        for (std::size_t i = 0; i < kIn; ++i) {
            double ref = f.weight[o * kIn + i];
            for (std::size_t k = 0; k < kRank; ++k) ref += a.w_dec()[o * kRank + k] * a.w_enc()[k * kIn + i];
            EXPECT_NEAR(m.weight[o * kIn + i], ref, 1e-15);
        }
    const MergeReport rep = verify_merge(a, f, m, 50, 1e-12);
    EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Merge, FoldedNasVariantsMatchUnmerged) {
    const FrozenProjection f = make_frozen(13);
    for (AdapterVariant v : {AdapterVariant::NasLoRA, AdapterVariant::NasPcLoRA}) {
        Adapter a = make_adapter(v, 14);
        suppress_maxpool(a, 15);
        const MergedProjection m = merge(a, f);
        ASSERT_EQ(m.kind, MergedProjection::Kind::Conv) << variant_name(v);
        ASSERT_EQ(m.weight.shape(), (Shape{kOut, kIn, 9, 9}));
        const MergeReport rep = verify_merge(a, f, m, 50, 1e-6, 3);
        EXPECT_TRUE(rep.pass) << variant_name(v) << " " << rep.max_rel_err;
    }
}

TEST(Merge, PartialMaskCenterCarriesPassthroughProduct) {
    const FrozenProjection f = make_frozen(13);
    Adapter a = make_adapter(AdapterVariant::NasPcLoRA, 16);
    std::vector<double> logits(8, 0.0);
    logits[op_index(CandidateOpKind::Zero)] = 1e3;
    set_alpha(a, logits);
    const MergedProjection m = merge(a, f);
    ASSERT_EQ(m.kind, MergedProjection::Kind::Conv);
    const auto pass = a.cell().mask().unselected();
    ASSERT_EQ(pass.size(), 1u);
    for (std::size_t o = 0; o < kOut; ++o)
        for (std::size_t i = 0; i < kIn; ++i) {
            const double ref = f.weight[o * kIn + i] + a.w_dec()[o * kRank + pass[0]] * a.w_enc()[pass[0] * kIn + i];
            EXPECT_NEAR(m.weight[(o * kIn + i) * 81 + 40], ref, 1e-15);
        }
}

TEST(Merge, CompositeFallbackIsFunctionallyIdentical) {
    const FrozenProjection f = make_frozen(17);
    const Adapter a = make_adapter(AdapterVariant::NasLoRA, 18);
    const MergedProjection m = merge(a, f);
    ASSERT_EQ(m.kind, MergedProjection::Kind::Composite);
    EXPECT_GT(m.maxpool_weight, kFoldTolerance);
    EXPECT_TRUE(verify_merge(a, f, m, 10, 0.0).pass);
}

TEST(Merge, MergedStateIsIndependentOfLaterTraining) {
    const FrozenProjection f = make_frozen(17);
    Adapter a = make_adapter(AdapterVariant::NasLoRA, 18);
    const MergedProjection m = merge(a, f);
    Rng rng(1);
    Tensor x = randn({1, kIn, 4, 4}, rng);
    const Tensor before = m.forward(x);
    for (double& v : a.w_enc().mutable_data()) v += 1.0;
    EXPECT_TRUE(bitwise_equal(m.forward(x), before));
}

TEST(Merge, PerturbedKernelFailsVerification) {
    const FrozenProjection f = make_frozen(19);
    Adapter a = make_adapter(AdapterVariant::NasPcLoRA, 20);
    suppress_maxpool(a, 21);
    MergedProjection m = merge(a, f);
    ASSERT_EQ(m.kind, MergedProjection::Kind::Conv);
    m.weight.mutable_data()[40] += 1e-3;
    const MergeReport rep = verify_merge(a, f, m, 50, 1e-6);
    EXPECT_FALSE(rep.pass);
    EXPECT_GT(rep.max_rel_err, 1e-6);

    const Adapter lora = make_adapter(AdapterVariant::LoRA, 22);
    MergedProjection d = merge(lora, f);
    d.weight.mutable_data()[0] += 1e-3;
    EXPECT_FALSE(verify_merge(lora, f, d, 50, 1e-12).pass);
    EXPECT_THROW(verify_merge(lora, f, d, 0, 1e-12), std::invalid_argument);
}

TEST(Variant, NamesRoundTrip) {
    for (AdapterVariant v :
         {AdapterVariant::None, AdapterVariant::LoRA, AdapterVariant::NasLoRA, AdapterVariant::NasPcLoRA}) {
        EXPECT_EQ(parse_variant(variant_name(v)), v);
    }
    EXPECT_THROW(parse_variant("dora"), std::invalid_argument);
}
