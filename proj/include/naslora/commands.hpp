// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>

#include "naslora/analysis.hpp"
#include "naslora/checkpoint.hpp"

namespace naslora {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInvalidConfig = 2;
inline constexpr int kExitDiverged = 3;

inline constexpr double kDenseMergeTol = 1e-12;
inline constexpr double kConvMergeTol = 1e-6;

/// epoch stage1 stage2 loss val_iou val_dice blend[0..7]
inline std::string metrics_log_line(const EpochRecord& r) {
    char buf[64];
    std::string line = std::to_string(r.epoch) + " " + (r.stage1 ? "1" : "0") + " " + (r.stage2 ? "1" : "0");
    for (double v : {r.loss, r.val_iou, r.val_dice}) {
        std::snprintf(buf, sizeof buf, " %.12e", v);
        line += buf;
    }
    for (double v : r.mean_blend) {
        std::snprintf(buf, sizeof buf, " %.12e", v);
        line += buf;
    }
    return line;
}

/// Model rebuilt from the embedded configuration, then loaded tensor by tensor.
inline SegModel model_from_checkpoint(const Checkpoint& ck, RunConfig* out_cfg = nullptr) {
    const RunConfig rc = parse_config(ck.config_text);
    SegModel model(rc.model, rc.train.seed);
    restore_model(model, ck);
    if (out_cfg) *out_cfg = rc;
    return model;
}

inline std::string projection_label(std::size_t block, std::size_t m) {
    std::string s = projection_prefix(block, m);
    s.pop_back();
    return s;
}

inline std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& out, std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%03zu.ckpt", epoch);
    return out / buf;
}

/// Stage-wise training with a metrics log (one line per epoch), periodic and final checkpoints.
/// With `resume`, model and optimizer state continue from the stored epoch.
inline int cmd_train(RunConfig rc, const std::filesystem::path& out, const std::optional<std::filesystem::path>& resume,
                     std::ostream& os) {
    std::optional<Checkpoint> from;
    if (resume) {
        from = load_checkpoint(*resume);
        rc = parse_config(from->config_text);
    }
    const std::string text = render_config(rc);
    std::filesystem::create_directories(out);
    SegModel model(rc.model, rc.train.seed);
    Trainer trainer(model, rc.train);
    std::vector<std::string> log_lines;
    if (from) {
        restore_model(model, *from);
        restore_trainer(trainer, *from);
        std::ifstream old(out / "metrics.log");
        std::string line;
        while (log_lines.size() < trainer.epoch() && std::getline(old, line)) log_lines.push_back(line);
    }
    const SplitData train(rc.data, Split::Train), val(rc.data, Split::Val);
    os << "run " << rc.name << ": " << variant_name(rc.model.variant) << ", " << model.trainable_count()
       << " trainable parameters (" << model.adapter_trainable_count() << " in adapters)\n";
    auto write_log = [&] {
        std::string all;
        for (const std::string& l : log_lines) all += l + "\n";
        write_file_atomic(out / "metrics.log", all);
    };
    try {
        while (!trainer.done()) {
            const EpochRecord rec = trainer.run_epoch(train, val);
            log_lines.push_back(metrics_log_line(rec));
            write_log();
            os << log_lines.back() << "\n" << std::flush;
            if (rc.checkpoint_every && rec.epoch % rc.checkpoint_every == 0 && !trainer.done()) {
                save_checkpoint(epoch_checkpoint_path(out, rec.epoch), capture(model, text, &trainer));
            }
        }
    } catch (const DivergenceError& e) {
        os << "error: " << e.what() << "\n";
        return kExitDiverged;
    }
    save_checkpoint(out / "final.ckpt", capture(model, text, &trainer));
    os << "wrote " << (out / "final.ckpt").string() << "\n";
    return kExitOk;
}

inline void print_metrics(std::ostream& os, const Metrics& m) {
    os << std::fixed << std::setprecision(4) << "IoU " << m.fg_iou << "  Dice " << m.fg_dice << "  Acc " << m.accuracy
       << "  BER " << m.ber << "  mIoU " << m.miou << "\n";
    for (std::size_t c = 0; c < m.iou.size(); ++c) {
        os << "  class " << c << ": IoU " << m.iou[c] << " Dice " << m.dice[c] << (m.empty[c] ? " (empty)" : "") << "\n";
    }
    os.unsetf(std::ios::floatfield);
}

inline int cmd_eval(const std::filesystem::path& ckpt, Split split, std::ostream& os) {
    RunConfig rc;
    const SegModel model = model_from_checkpoint(load_checkpoint(ckpt), &rc);
    const SplitData data(rc.data, split);
    os << "split " << split_name(split) << " (" << data.size() << " samples)" << (model.merged() ? ", merged" : "") << "\n";
    print_metrics(os, evaluate(model, data));
    return kExitOk;
}

inline int cmd_merge(const std::filesystem::path& ckpt, const std::filesystem::path& out, std::ostream& os) {
    const Checkpoint ck = load_checkpoint(ckpt);
    SegModel model = model_from_checkpoint(ck);
    model.merge_adapters();
    for (std::size_t i = 0; i < model.blocks().size(); ++i)
        for (std::size_t m = 0; m < 3; ++m) {
            const AdaptedProjection& p = model.blocks()[i].qkv[m];
            if (!p.merged) continue;
            os << projection_label(i, m) << " " << merged_kind_name(p.merged->kind);
            if (p.merged->kind == MergedProjection::Kind::Composite) os << " (max_pool weight " << p.merged->maxpool_weight << ")";
            os << "\n";
        }
    save_checkpoint(out, capture(model, ck.config_text));
    os << "wrote " << out.string() << "\n";
    return kExitOk;
}

/// Compares merged and unmerged forwards per adapted matrix. Stored merged tensors are
/// checked as stored; otherwise the merge is computed here.
inline int cmd_verify_merge(const std::filesystem::path& ckpt, std::size_t trials, std::ostream& os) {
    const SegModel model = model_from_checkpoint(load_checkpoint(ckpt));
    bool all = true;
    std::size_t checked = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < model.blocks().size(); ++i)
        for (std::size_t m = 0; m < 3; ++m) {
            const AdaptedProjection& p = model.blocks()[i].qkv[m];
            if (!p.adapter) continue;
            const MergedProjection merged = p.merged ? *p.merged : merge(*p.adapter, p.frozen);
            const double tol = merged.kind == MergedProjection::Kind::Conv ? kConvMergeTol : kDenseMergeTol;
            const MergeReport rep = verify_merge(*p.adapter, p.frozen, merged, trials, tol, derive_seed({i, m}));
            all = all && rep.pass;
            worst = std::max(worst, rep.max_rel_err);
            ++checked;
            os << projection_label(i, m) << " " << merged_kind_name(merged.kind) << " max_rel_err " << std::scientific
               << std::setprecision(3) << rep.max_rel_err << " tol " << tol << (rep.pass ? " pass" : " FAIL");
            if (merged.kind == MergedProjection::Kind::Composite) os << " (fallback: max_pool weight " << merged.maxpool_weight << ")";
            os << "\n";
            os.unsetf(std::ios::floatfield);
        }
    if (checked == 0) os << "no adapted projections\n";
    os << "overall " << (all ? "pass" : "FAIL") << " (" << checked << " matrices, worst " << std::scientific
       << std::setprecision(3) << worst << ")\n";
    os.unsetf(std::ios::floatfield);
    return all ? kExitOk : kExitFailure;
}

/// Op proportions, mean attention distance (untrained vs loaded weights) and split metrics.
inline int cmd_analyze(const std::filesystem::path& ckpt, Split metrics_split, Split attention_split, std::size_t samples,
                       std::ostream& os) {
    RunConfig rc;
    const SegModel model = model_from_checkpoint(load_checkpoint(ckpt), &rc);
    const SegModel initial(rc.model, rc.train.seed);
    const auto cells = model.cells();
    os << std::fixed << std::setprecision(6);
    if (cells.empty()) {
        os << "op proportions: no search cells in this model\n";
    } else {
        const Tensor prop = op_proportions(cells);
        double total = 0.0;
        os << "op proportions over " << cells.size() << " cells\n";
        for (CandidateOpKind k : kAllCandidateOps) {
            os << "  " << std::left << std::setw(14) << op_name(k) << std::right << prop[op_index(k)] << "\n";
            total += prop[op_index(k)];
        }
        os << "  sum " << std::setprecision(15) << total << std::setprecision(6) << "\n";
    }
    const SplitData attn_data(rc.data, attention_split);
    const AttentionReport before = attention_distance_report(initial, attn_data, samples);
    const AttentionReport after = attention_distance_report(model, attn_data, samples);
    os << "mean attention distance (patches), " << after.samples << " " << split_name(attention_split) << " samples\n";
    os << "  layer  initial    loaded\n";
    for (std::size_t l = 0; l < after.per_layer.size(); ++l) {
        os << "  " << std::setw(5) << l + 1 << "  " << std::setw(9) << before.per_layer[l] << "  " << std::setw(9)
           << after.per_layer[l] << "\n";
    }
    os.unsetf(std::ios::floatfield);
    const SplitData data(rc.data, metrics_split);
    os << "metrics on " << split_name(metrics_split) << "\n";
    print_metrics(os, evaluate(model, data));
    return kExitOk;
}

inline void write_pgm(const std::filesystem::path& path, std::size_t S, const std::vector<std::uint8_t>& pixels) {
    std::string bytes = "P5\n" + std::to_string(S) + " " + std::to_string(S) + "\n255\n";
    bytes.append(pixels.begin(), pixels.end());
    write_file_atomic(path, bytes);
}

/// Binary PGM dumps: one file per image channel plus the label map scaled to 0..255.
inline int cmd_gen_data(const RunConfig& rc, const std::filesystem::path& out, Split split, std::size_t count,
                        std::ostream& os) {
    const std::size_t S = rc.data.image_size, P = S * S, K = rc.data.num_classes;
    const std::size_t n = std::min(count, rc.data.split_size(split));
    for (std::size_t i = 0; i < n; ++i) {
        const SegSample s = generate_sample(rc.data, split, i);
        char stem[64];
        std::snprintf(stem, sizeof stem, "%s_%04zu", std::string(split_name(split)).c_str(), i);
        for (std::size_t c = 0; c < 3; ++c) {
            std::vector<std::uint8_t> px(P);
            for (std::size_t p = 0; p < P; ++p) px[p] = static_cast<std::uint8_t>(std::lround(255.0 * s.image[c * P + p]));
            write_pgm(out / (std::string(stem) + "_c" + std::to_string(c) + ".pgm"), S, px);
        }
        std::vector<std::uint8_t> lab(P);
        for (std::size_t p = 0; p < P; ++p) lab[p] = static_cast<std::uint8_t>(s.labels[p] * (255 / K));
        write_pgm(out / (std::string(stem) + "_labels.pgm"), S, lab);
    }
    os << "wrote " << n << " " << split_name(split) << " samples to " << out.string() << "\n";
    return kExitOk;
}

}  // namespace naslora
