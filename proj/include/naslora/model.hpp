// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <utility>

#include "naslora/adapter.hpp"

namespace naslora {

struct ModelConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t num_queries = 8;
    /// Foreground classes; label 0 is background.
    std::size_t num_classes = 1;
    std::size_t decoder_dim = 32;
    std::size_t pixel_dim = 8;
    AdapterVariant variant = AdapterVariant::NasPcLoRA;
    /// 1-based block indices; empty means every block.
    std::set<std::size_t> adapter_layers;
    std::size_t rank = 3;
    double mask_ratio = 2.0 / 3.0;
    double alpha_scale = 1e-3;
    /// Seed of the frozen backbone, kept apart from the run seed.
    std::uint64_t backbone_seed = 1;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }

    bool adapted(std::size_t block) const {
        return variant != AdapterVariant::None && (adapter_layers.empty() || adapter_layers.count(block + 1) > 0);
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
        if (patch_size & (patch_size - 1)) fail("patch_size must be a power of two");
        if (heads == 0 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
        if (depth == 0) fail("depth must be >= 1");
        if (num_queries == 0) fail("num_queries must be >= 1");
        if (num_classes == 0) fail("num_classes must be >= 1");
        if (decoder_dim == 0 || pixel_dim == 0 || mlp_ratio == 0) fail("decoder_dim, pixel_dim and mlp_ratio must be >= 1");
        for (std::size_t l : adapter_layers) {
            if (l < 1 || l > depth) fail("adapter_layers must lie in 1.." + std::to_string(depth));
        }
        if (variant != AdapterVariant::None && (rank == 0 || 2 * rank >= embed_dim)) fail("rank must satisfy 0 < r < embed_dim/2");
        if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) fail("mask_ratio must lie in [0, 1]");
    }
};

/// Frozen projection with an optional adapter and, after merging, its inference form.
struct AdaptedProjection {
    FrozenProjection frozen;
    std::optional<Adapter> adapter;
    std::optional<MergedProjection> merged;

    Tensor forward(const Tensor& x) const {
        if (merged) return merged->forward(x);
        if (adapter) return adapter_forward(*adapter, frozen, x);
        return frozen.forward(x);
    }
};

inline constexpr std::array<const char*, 3> kQkvNames = {"q", "k", "v"};

struct EncoderBlock {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    std::array<AdaptedProjection, 3> qkv;
    Tensor w_out, w_fc1, w_fc2;
};

struct DecoderParams {
    Tensor neck_w, neck_b;
    Tensor query_embed;
    Tensor prompt;  // frozen constant
    Tensor ca_q, ca_k, ca_v, ca_o, ca_o_b;
    Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    Tensor cls_w, cls_b;
    Tensor emb_w, emb_b;
    std::vector<Tensor> up_w, up_b;
    Tensor img_w, img_b;
};

struct EncoderOutput {
    Tensor feature;                  // [B x C x Hp x Wp]
    std::vector<Tensor> attention;   // per block [B x heads x N x N] when requested
};

struct ModelOutput {
    Tensor mask_logits;   // [B x M x S x S]
    Tensor class_logits;  // [B x M x (K+1)]
    std::vector<Tensor> attention;
};

class SegModel {
public:
    SegModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        init_encoder();
        init_adapters(seed);
        init_decoder(seed);
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<EncoderBlock>& blocks() const { return blocks_; }
    std::vector<EncoderBlock>& blocks() { return blocks_; }
    const DecoderParams& decoder() const { return dec_; }

    EncoderOutput encode(const Tensor& images, bool keep_attention = false) const {
        const std::size_t S = cfg_.image_size, C = cfg_.embed_dim, G = cfg_.grid(), N = cfg_.tokens();
        if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != S || images.dim(3) != S) {
            throw ShapeError("encoder: expected images [B x 3 x " + std::to_string(S) + " x " + std::to_string(S) +
                             "], got " + shape_str(images.shape()));
        }
        const std::size_t B = images.dim(0), H = cfg_.heads, dh = C / H;
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        EncoderOutput out;
        Tensor x = add_batch_broadcast(project_channels(space_to_depth(images, cfg_.patch_size), patch_w_), pos_);
        for (const EncoderBlock& blk : blocks_) {
            Tensor h = layer_norm_channels(x, blk.ln1_g, blk.ln1_b);
            Tensor q = reshape(blk.qkv[0].forward(h), {B * H, dh, N});
            Tensor k = reshape(blk.qkv[1].forward(h), {B * H, dh, N});
            Tensor v = reshape(blk.qkv[2].forward(h), {B * H, dh, N});
            Tensor attn = softmax_lastdim(scale(bmm(q, k, true, false), inv));  // [BH x N x N]
            if (keep_attention) out.attention.push_back(reshape(attn, {B, H, N, N}).detach());
            Tensor ctx = reshape(bmm(v, attn, false, true), {B, C, G, G});
            x = add(x, project_channels(ctx, blk.w_out));
            Tensor m = layer_norm_channels(x, blk.ln2_g, blk.ln2_b);
            x = add(x, project_channels(gelu(project_channels(m, blk.w_fc1)), blk.w_fc2));
        }
        out.feature = layer_norm_channels(x, lnf_g_, lnf_b_);
        return out;
    }

    /// Mask and class logits from encoder features; `images` feed the full-resolution skip.
    std::pair<Tensor, Tensor> decode(const Tensor& feature, const Tensor& images) const {
        const std::size_t B = feature.dim(0), D = cfg_.decoder_dim, N = cfg_.tokens(), S = cfg_.image_size;
        const std::size_t M = cfg_.num_queries, E = cfg_.pixel_dim;
        Tensor neck = gelu(add_channel_bias(project_channels(feature, dec_.neck_w), dec_.neck_b));  // [B x D x G x G]
        Tensor tokens = reshape(neck, {B, D, N});
        Tensor queries = expand_batch(add_batch_broadcast(dec_.query_embed, dec_.prompt), B);  // [B x M x D]

        Tensor qh = linear(queries, dec_.ca_q);
        Tensor kh = project_channels(tokens, dec_.ca_k);
        Tensor vh = project_channels(tokens, dec_.ca_v);
        Tensor attn = softmax_lastdim(scale(bmm(qh, kh), 1.0 / std::sqrt(static_cast<double>(D))));  // [B x M x N]
        queries = add(queries, linear(bmm(attn, vh, false, true), dec_.ca_o, dec_.ca_o_b));
        queries = add(queries, linear(gelu(linear(queries, dec_.mlp1_w, dec_.mlp1_b)), dec_.mlp2_w, dec_.mlp2_b));

        Tensor class_logits = linear(queries, dec_.cls_w, dec_.cls_b);
        Tensor embed = linear(queries, dec_.emb_w, dec_.emb_b);  // [B x M x E]

        Tensor pix = neck;
        for (std::size_t s = 0; s < dec_.up_w.size(); ++s) {
            pix = add_channel_bias(depth_to_space(project_channels(pix, dec_.up_w[s]), 2), dec_.up_b[s]);
            if (s + 1 < dec_.up_w.size()) pix = gelu(pix);
        }
        pix = gelu(add(pix, add_channel_bias(project_channels(images, dec_.img_w), dec_.img_b)));  // [B x E x S x S]
        Tensor masks = reshape(bmm(embed, reshape(pix, {B, E, S * S})), {B, M, S, S});
        return {masks, class_logits};
    }

    ModelOutput forward(const Tensor& images, bool keep_attention = false) const {
        EncoderOutput enc = encode(images, keep_attention);
        auto [masks, cls] = decode(enc.feature, images);
        return ModelOutput{masks, cls, std::move(enc.attention)};
    }

    /// Adapter kernels, W_e, W_d and every decoder parameter.
    std::vector<Tensor> weight_group() const {
        std::vector<Tensor> out;
        for (const EncoderBlock& b : blocks_)
            for (const AdaptedProjection& p : b.qkv)
                if (p.adapter)
                    for (const Tensor& t : p.adapter->weight_parameters()) out.push_back(t);
        for (const Tensor& t : decoder_trainables()) out.push_back(t);
        return out;
    }

    std::vector<Tensor> alpha_group() const {
        std::vector<Tensor> out;
        for (const NasCell* c : cells()) out.push_back(c->alpha());
        return out;
    }

    std::vector<Tensor> frozen_group() const {
        std::vector<Tensor> out{patch_w_, pos_, lnf_g_, lnf_b_, dec_.prompt};
        for (const EncoderBlock& b : blocks_) {
            for (const Tensor* t : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.w_out, &b.w_fc1, &b.w_fc2}) out.push_back(*t);
            for (const AdaptedProjection& p : b.qkv) out.push_back(p.frozen.weight);
        }
        return out;
    }

    std::vector<const NasCell*> cells() const {
        std::vector<const NasCell*> out;
        for (const EncoderBlock& b : blocks_)
            for (const AdaptedProjection& p : b.qkv)
                if (p.adapter && p.adapter->has_cell()) out.push_back(&p.adapter->cell());
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const Tensor& t : weight_group()) n += t.numel();
        for (const Tensor& t : alpha_group()) n += t.numel();
        return n;
    }

    std::size_t adapter_trainable_count() const {
        std::size_t n = 0;
        for (const EncoderBlock& b : blocks_)
            for (const AdaptedProjection& p : b.qkv)
                if (p.adapter) n += p.adapter->trainable_count();
        return n;
    }

    /// Every persistent tensor under a stable name (masks encoded as 0/1 values).
    std::vector<std::pair<std::string, Tensor>> named_tensors() const {
        std::vector<std::pair<std::string, Tensor>> out{
            {"enc.patch", patch_w_}, {"enc.pos", pos_}, {"enc.lnf.g", lnf_g_}, {"enc.lnf.b", lnf_b_}};
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const EncoderBlock& b = blocks_[i];
            const std::string pre = "enc.b" + std::to_string(i) + ".";
            out.insert(out.end(), {{pre + "ln1.g", b.ln1_g}, {pre + "ln1.b", b.ln1_b}, {pre + "ln2.g", b.ln2_g},
                                   {pre + "ln2.b", b.ln2_b}, {pre + "out", b.w_out}, {pre + "fc1", b.w_fc1},
                                   {pre + "fc2", b.w_fc2}});
            for (std::size_t m = 0; m < 3; ++m) {
                const AdaptedProjection& p = b.qkv[m];
                const std::string pp = pre + kQkvNames[m] + ".";
                out.emplace_back(pp + "w0", p.frozen.weight);
                if (!p.adapter) continue;
                out.emplace_back(pp + "we", p.adapter->w_enc());
                out.emplace_back(pp + "wd", p.adapter->w_dec());
                if (!p.adapter->has_cell()) continue;
                const NasCell& c = p.adapter->cell();
                out.emplace_back(pp + "alpha", c.alpha());
                std::vector<double> mask;
                for (bool s : c.mask().selected) mask.push_back(s ? 1.0 : 0.0);
                out.emplace_back(pp + "mask", Tensor({mask.size()}, mask));
                for (CandidateOpKind k : kAllCandidateOps) {
                    const CandidateOpParams& op = c.op(k);
                    const std::string po = pp + "op." + std::string(op_name(k)) + ".";
                    if (op.depthwise.defined()) out.emplace_back(po + "dw", op.depthwise);
                    if (op.pointwise.defined()) out.emplace_back(po + "pw", op.pointwise);
                    if (op.kernel.defined()) out.emplace_back(po + "k", op.kernel);
                }
            }
        }
        const DecoderParams& d = dec_;
        out.insert(out.end(), {{"dec.neck.w", d.neck_w}, {"dec.neck.b", d.neck_b}, {"dec.query", d.query_embed},
                               {"dec.prompt", d.prompt}, {"dec.ca.q", d.ca_q}, {"dec.ca.k", d.ca_k}, {"dec.ca.v", d.ca_v},
                               {"dec.ca.o", d.ca_o}, {"dec.ca.o_b", d.ca_o_b}, {"dec.mlp1.w", d.mlp1_w},
                               {"dec.mlp1.b", d.mlp1_b}, {"dec.mlp2.w", d.mlp2_w}, {"dec.mlp2.b", d.mlp2_b},
                               {"dec.cls.w", d.cls_w}, {"dec.cls.b", d.cls_b}, {"dec.emb.w", d.emb_w},
                               {"dec.emb.b", d.emb_b}, {"dec.img.w", d.img_w}, {"dec.img.b", d.img_b}});
        for (std::size_t s = 0; s < d.up_w.size(); ++s) {
            out.emplace_back("dec.up" + std::to_string(s) + ".w", d.up_w[s]);
            out.emplace_back("dec.up" + std::to_string(s) + ".b", d.up_b[s]);
        }
        return out;
    }

    /// Replaces every adapted projection by its merged form.
    void merge_adapters() {
        for (EncoderBlock& b : blocks_)
            for (AdaptedProjection& p : b.qkv)
                if (p.adapter) p.merged = merge(*p.adapter, p.frozen);
    }

    bool merged() const {
        for (const EncoderBlock& b : blocks_)
            for (const AdaptedProjection& p : b.qkv)
                if (p.merged) return true;
        return false;
    }

private:
    static Tensor frozen_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
        return kaiming_uniform(shape, fan_in, rng, false);
    }

    void init_encoder() {
        Rng rng(derive_seed({cfg_.backbone_seed, 0xB0}));
        const std::size_t C = cfg_.embed_dim, P = 3 * cfg_.patch_size * cfg_.patch_size, G = cfg_.grid();
        const std::size_t Hd = C * cfg_.mlp_ratio;
        patch_w_ = frozen_uniform({C, P}, P, rng);
        pos_ = randn({C, G, G}, rng, 0.1);
        lnf_g_ = Tensor::full({C}, 1.0);
        lnf_b_ = Tensor::zeros({C});
        blocks_.resize(cfg_.depth);
        for (EncoderBlock& b : blocks_) {
            b.ln1_g = Tensor::full({C}, 1.0);
            b.ln1_b = Tensor::zeros({C});
            b.ln2_g = Tensor::full({C}, 1.0);
            b.ln2_b = Tensor::zeros({C});
            for (AdaptedProjection& p : b.qkv) p.frozen.weight = frozen_uniform({C, C}, C, rng);
            b.w_out = frozen_uniform({C, C}, C, rng);
            b.w_fc1 = frozen_uniform({Hd, C}, C, rng);
            b.w_fc2 = frozen_uniform({C, Hd}, Hd, rng);
        }
    }

    void init_adapters(std::uint64_t seed) {
        const std::size_t C = cfg_.embed_dim;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (!cfg_.adapted(i)) continue;
            for (std::size_t m = 0; m < 3; ++m) {
                Rng rng(derive_seed({seed, 0xAD, i, m}));
                blocks_[i].qkv[m].adapter = Adapter::create(cfg_.variant, C, C, cfg_.rank, cfg_.mask_ratio, rng,
                                                            derive_seed({seed, 0x3A, i, m}), cfg_.alpha_scale);
            }
        }
    }

    void init_decoder(std::uint64_t seed) {
        Rng rng(derive_seed({seed, 0xDE}));
        const std::size_t C = cfg_.embed_dim, D = cfg_.decoder_dim, M = cfg_.num_queries, E = cfg_.pixel_dim;
        const std::size_t K1 = cfg_.num_classes + 1, Hd = 2 * D;
        auto w = [&](std::size_t o, std::size_t i) { return kaiming_uniform({o, i}, i, rng); };
        auto b = [](std::size_t n) { return Tensor::zeros({n}, true); };
        dec_.neck_w = w(D, C);
        dec_.neck_b = b(D);
        dec_.query_embed = randn({M, D}, rng, 1.0, true);
        dec_.prompt = randn({D}, rng, 0.1);
        dec_.ca_q = w(D, D);
        dec_.ca_k = w(D, D);
        dec_.ca_v = w(D, D);
        dec_.ca_o = w(D, D);
        dec_.ca_o_b = b(D);
        dec_.mlp1_w = w(Hd, D);
        dec_.mlp1_b = b(Hd);
        dec_.mlp2_w = w(D, Hd);
        dec_.mlp2_b = b(D);
        dec_.cls_w = w(K1, D);
        dec_.cls_b = b(K1);
        dec_.emb_w = w(E, D);
        dec_.emb_b = b(E);
        std::size_t in = D;
        for (std::size_t p = cfg_.patch_size; p > 1; p /= 2) {
            const std::size_t outc = p == 2 ? E : 2 * E;
            dec_.up_w.push_back(w(4 * outc, in));
            dec_.up_b.push_back(b(outc));
            in = outc;
        }
        dec_.img_w = w(E, 3);
        dec_.img_b = b(E);
    }

    std::vector<Tensor> decoder_trainables() const {
        const DecoderParams& d = dec_;
        std::vector<Tensor> out{d.neck_w, d.neck_b, d.query_embed, d.ca_q,   d.ca_k,   d.ca_v,  d.ca_o,
                                d.ca_o_b, d.mlp1_w, d.mlp1_b,      d.mlp2_w, d.mlp2_b, d.cls_w, d.cls_b,
                                d.emb_w,  d.emb_b,  d.img_w,       d.img_b};
        for (std::size_t s = 0; s < d.up_w.size(); ++s) {
            out.push_back(d.up_w[s]);
            out.push_back(d.up_b[s]);
        }
        return out;
    }

    ModelConfig cfg_;
    Tensor patch_w_, pos_, lnf_g_, lnf_b_;
    std::vector<EncoderBlock> blocks_;
    DecoderParams dec_;
};

struct SemanticResult {
    Tensor scores;                    // [B x K x S x S]
    std::vector<std::uint8_t> labels; // B*S*S, values in {0..K}
};

/// Threshold on the best foreground score below which a pixel is background.
inline constexpr double kForegroundThreshold = 0.5;

/// scores[b,c] = sum_m softmax(class)[b,m,c] * sigmoid(mask)[b,m] over the K foreground
/// classes; label = 1 + argmax (lowest index on ties) when the best score reaches the threshold.
inline SemanticResult semantic_inference(const Tensor& mask_logits, const Tensor& class_logits) {
    GradTape::Pause pause;
    if (mask_logits.rank() != 4 || class_logits.rank() != 3 || class_logits.dim(0) != mask_logits.dim(0) ||
        class_logits.dim(1) != mask_logits.dim(1) || class_logits.dim(2) < 2) {
        throw ShapeError("semantic_inference: expected masks [B x M x H x W] and classes [B x M x (K+1)]");
    }
    const std::size_t B = mask_logits.dim(0), M = mask_logits.dim(1), P = mask_logits.dim(2) * mask_logits.dim(3);
    const std::size_t K = class_logits.dim(2) - 1;
    const Tensor probs = softmax_lastdim(class_logits);
    std::vector<double> scores(B * K * P, 0.0);
    const auto ml = mask_logits.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) {
            const double* row = ml.data() + (b * M + m) * P;
            for (std::size_t c = 0; c < K; ++c) {
                const double w = probs[(b * M + m) * (K + 1) + c];
                double* dst = scores.data() + (b * K + c) * P;
                for (std::size_t p = 0; p < P; ++p) dst[p] += w / (1.0 + std::exp(-row[p]));
            }
        }
    SemanticResult r;
    r.labels.assign(B * P, 0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p) {
            std::size_t best = 0;
            double bv = scores[(b * K) * P + p];
            for (std::size_t c = 1; c < K; ++c) {
                const double v = scores[(b * K + c) * P + p];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            if (bv >= kForegroundThreshold) r.labels[b * P + p] = static_cast<std::uint8_t>(best + 1);
        }
    r.scores = Tensor({B, K, mask_logits.dim(2), mask_logits.dim(3)}, std::move(scores));
    return r;
}

/// Attention-weighted mean Euclidean distance between query and key patches, averaged over
/// queries, heads and batch. `attention` is [..., N x N] with N = grid_h * grid_w.
inline double mean_attention_distance(const Tensor& attention, std::size_t grid_h, std::size_t grid_w,
                                      double row_tol = 1e-9) {
    const std::size_t N = grid_h * grid_w;
    if (attention.rank() < 2 || attention.shape().back() != N || attention.dim(attention.rank() - 2) != N) {
        throw ShapeError("mean_attention_distance: trailing extents must be N x N with N = " + std::to_string(N));
    }
    std::vector<double> dist(N * N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const double dy = double(i / grid_w) - double(j / grid_w), dx = double(i % grid_w) - double(j % grid_w);
            dist[i * N + j] = std::sqrt(dy * dy + dx * dx);
        }
    const auto a = attention.data();
    const std::size_t rows = attention.numel() / N;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = a.data() + r * N;
        const std::size_t i = r % N;
        double s = 0.0, d = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
            if (row[j] < 0.0) throw std::invalid_argument("mean_attention_distance: negative attention weight");
            s += row[j];
            d += row[j] * dist[i * N + j];
        }
        if (std::abs(s - 1.0) > row_tol) throw std::invalid_argument("mean_attention_distance: row is not stochastic");
        total += d;
    }
    return total / static_cast<double>(rows);
}

}  // namespace naslora
