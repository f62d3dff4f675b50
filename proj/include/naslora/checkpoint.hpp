// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "naslora/config.hpp"

namespace naslora {

inline constexpr char kCheckpointMagic[8] = {'N', 'A', 'S', 'L', 'O', 'R', 'A', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Named tensors plus the run configuration text.
struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(std::string_view name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor& at(std::string_view name) const {
        const Tensor* t = find(name);
        if (!t) throw CheckpointError("checkpoint has no tensor '" + std::string(name) + "'");
        return *t;
    }
    void put(std::string name, const Tensor& t) { tensors.emplace_back(std::move(name), t.detach()); }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::string_view in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += sizeof(T);
    return v;
}

}  // namespace detail

/// Layout: magic[8] | version u32 | config length u64 | config bytes | tensor count u64 |
/// per tensor: name length u32 | name | rank u32 | extents u64[rank] | f64[numel]. All little-endian.
inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(kCheckpointMagic, 8);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, ck.config_text.size());
    out += ck.config_text;
    detail::put_le<std::uint64_t>(out, ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
        for (double v : t.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view in) {
    if (in.size() < 8 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    std::size_t pos = 8;
    const auto version = detail::get_le<std::uint32_t>(in, pos);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    const auto clen = detail::get_le<std::uint64_t>(in, pos);
    if (pos + clen > in.size()) throw CheckpointError("checkpoint truncated in config text");
    ck.config_text = std::string(in.substr(pos, clen));
    pos += clen;
    const auto count = detail::get_le<std::uint64_t>(in, pos);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto nlen = detail::get_le<std::uint32_t>(in, pos);
        if (pos + nlen > in.size()) throw CheckpointError("checkpoint truncated in tensor name");
        std::string name(in.substr(pos, nlen));
        pos += nlen;
        const auto rank = detail::get_le<std::uint32_t>(in, pos);
        Shape shape(rank);
        for (auto& d : shape) d = detail::get_le<std::uint64_t>(in, pos);
        const std::size_t n = shape_numel(shape);
        if (pos + 8 * n > in.size()) throw CheckpointError("checkpoint truncated in tensor '" + name + "'");
        std::vector<double> values(n);
        for (double& v : values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in, pos));
        ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    if (pos != in.size()) throw CheckpointError("trailing bytes after checkpoint payload");
    return ck;
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot read checkpoint '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return decode_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Model and trainer state
// ---------------------------------------------------------------------------

inline std::string projection_prefix(std::size_t block, std::size_t m) {
    return "enc.b" + std::to_string(block) + "." + kQkvNames[m] + ".";
}

inline void capture_optimizer(Checkpoint& ck, const std::string& prefix, const AdamW& opt) {
    ck.put(prefix + "step", Tensor::scalar(static_cast<double>(opt.steps())));
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        ck.put(prefix + "m." + std::to_string(i), opt.first_moments()[i]);
        ck.put(prefix + "v." + std::to_string(i), opt.second_moments()[i]);
    }
}

/// Model tensors, merged projections when present, and optionally trainer state.
inline Checkpoint capture(const SegModel& model, const std::string& config_text, Trainer* trainer = nullptr) {
    Checkpoint ck;
    ck.config_text = config_text;
    for (const auto& [name, t] : model.named_tensors()) ck.put(name, t);
    for (std::size_t i = 0; i < model.blocks().size(); ++i)
        for (std::size_t m = 0; m < 3; ++m) {
            const AdaptedProjection& p = model.blocks()[i].qkv[m];
            if (!p.merged) continue;
            const std::string pre = projection_prefix(i, m) + "merged.";
            ck.put(pre + "kind", Tensor::scalar(static_cast<double>(p.merged->kind)));
            ck.put(pre + "maxpool", Tensor::scalar(p.merged->maxpool_weight));
            if (p.merged->weight.defined()) ck.put(pre + "w", p.merged->weight);
        }
    if (trainer) {
        ck.put("train.epoch", Tensor::scalar(static_cast<double>(trainer->epoch())));
        capture_optimizer(ck, "opt.w.", trainer->weight_optimizer());
        capture_optimizer(ck, "opt.a.", trainer->alpha_optimizer());
    }
    return ck;
}

namespace detail {

inline void copy_into(Tensor dst, const Tensor& src, const std::string& name) {
    if (dst.shape() != src.shape()) {
        throw CheckpointError("tensor '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                              shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

}  // namespace detail

/// Loads every model tensor (and stored merged projections) by name. Channel masks must match.
inline void restore_model(SegModel& model, const Checkpoint& ck) {
    for (const auto& [name, t] : model.named_tensors()) {
        if (name.size() > 5 && name.ends_with(".mask")) {
            const Tensor& stored = ck.at(name);
            if (stored.shape() != t.shape() || !std::equal(stored.data().begin(), stored.data().end(), t.data().begin())) {
                throw CheckpointError("channel mask '" + name + "' differs from the configured mask");
            }
            continue;
        }
        detail::copy_into(t, ck.at(name), name);
    }
    for (std::size_t i = 0; i < model.blocks().size(); ++i)
        for (std::size_t m = 0; m < 3; ++m) {
            AdaptedProjection& p = model.blocks()[i].qkv[m];
            const std::string pre = projection_prefix(i, m) + "merged.";
            const Tensor* kind = ck.find(pre + "kind");
            if (!kind) {
                p.merged.reset();
                continue;
            }
            if (!p.adapter) throw CheckpointError("merged tensors for an unadapted projection: " + pre);
            const auto k = static_cast<MergedProjection::Kind>(static_cast<int>(kind->item()));
            if (k == MergedProjection::Kind::Composite) {
                p.merged = merge(*p.adapter, p.frozen);
                if (p.merged->kind != MergedProjection::Kind::Composite) {
                    throw CheckpointError("stored composite merge for " + pre + " but the cell folds");
                }
            } else {
                MergedProjection mp;
                mp.kind = k;
                mp.weight = ck.at(pre + "w").detach();
                mp.maxpool_weight = ck.at(pre + "maxpool").item();
                p.merged = std::move(mp);
            }
        }
}

inline void restore_optimizer(AdamW& opt, const Checkpoint& ck, const std::string& prefix) {
    opt.set_steps(static_cast<std::uint64_t>(ck.at(prefix + "step").item()));
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        detail::copy_into(opt.first_moments()[i], ck.at(prefix + "m." + std::to_string(i)), prefix + "m");
        detail::copy_into(opt.second_moments()[i], ck.at(prefix + "v." + std::to_string(i)), prefix + "v");
    }
}

inline void restore_trainer(Trainer& trainer, const Checkpoint& ck) {
    trainer.set_epoch(static_cast<std::size_t>(ck.at("train.epoch").item()));
    restore_optimizer(trainer.weight_optimizer(), ck, "opt.w.");
    restore_optimizer(trainer.alpha_optimizer(), ck, "opt.a.");
}

}  // namespace naslora
