// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "naslora/train.hpp"

namespace naslora {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct RunConfig {
    std::string name = "run";
    std::string out_dir = "runs";
    /// Write an intermediate checkpoint every N epochs (0 disables).
    std::size_t checkpoint_every = 10;
    ModelConfig model;
    TrainConfig train;
    DataConfig data;

    /// Pushes shared fields into the data config and validates every part.
    void finalize() {
        data.image_size = model.image_size;
        data.num_classes = model.num_classes;
        data.seed = train.seed;
        model.validate();
        train.validate();
        data.validate();
    }

    void set_seed(std::uint64_t seed) {
        train.seed = seed;
        data.seed = seed;
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(const std::string& v, const std::string& key) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
    return out;
}

/// Decimal or a rational "a/b".
inline double parse_real(const std::string& v, const std::string& key) {
    auto one = [&](std::string_view s) {
        double out = 0.0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
        return out;
    };
    const auto slash = v.find('/');
    if (slash == std::string::npos) return one(v);
    const double den = one(trim(std::string_view(v).substr(slash + 1)));
    if (den == 0.0) throw ConfigError("'" + key + "': zero denominator");
    return one(trim(std::string_view(v).substr(0, slash))) / den;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

inline std::set<std::size_t> parse_layers(const std::string& v, const std::string& key) {
    std::set<std::size_t> out;
    if (v == "all" || v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        const auto dots = item.find("..");
        if (dots == std::string::npos) {
            out.insert(parse_size(item, key));
        } else {
            const std::size_t a = parse_size(trim(item.substr(0, dots)), key), b = parse_size(trim(item.substr(dots + 2)), key);
            if (b < a) throw ConfigError("'" + key + "': empty range " + item);
            for (std::size_t l = a; l <= b; ++l) out.insert(l);
        }
    }
    return out;
}

}  // namespace detail

/// Parses `key = value` lines under [run], [model], [train] and [data]. '#' and ';' start
/// comments. Unknown sections or keys and repeated keys are errors.
inline RunConfig parse_config(std::string_view text) {
    RunConfig rc;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto sz = [](std::size_t& f) -> Setter { return [&f](const std::string& v, const std::string& k) { f = detail::parse_size(v, k); }; };
    auto u64 = [](std::uint64_t& f) -> Setter { return [&f](const std::string& v, const std::string& k) { f = detail::parse_size(v, k); }; };
    auto real = [](double& f) -> Setter { return [&f](const std::string& v, const std::string& k) { f = detail::parse_real(v, k); }; };
    auto flag = [](bool& f) -> Setter { return [&f](const std::string& v, const std::string& k) { f = detail::parse_bool(v, k); }; };
    auto str = [](std::string& f) -> Setter { return [&f](const std::string& v, const std::string&) { f = v; }; };
    ModelConfig& m = rc.model;
    TrainConfig& t = rc.train;
    DataConfig& d = rc.data;
    const std::map<std::string, Setter> setters = {
        {"run.name", str(rc.name)},
        {"run.out_dir", str(rc.out_dir)},
        {"run.checkpoint_every", sz(rc.checkpoint_every)},
        {"model.image_size", sz(m.image_size)},
        {"model.patch_size", sz(m.patch_size)},
        {"model.embed_dim", sz(m.embed_dim)},
        {"model.depth", sz(m.depth)},
        {"model.heads", sz(m.heads)},
        {"model.mlp_ratio", sz(m.mlp_ratio)},
        {"model.num_queries", sz(m.num_queries)},
        {"model.num_classes", sz(m.num_classes)},
        {"model.decoder_dim", sz(m.decoder_dim)},
        {"model.pixel_dim", sz(m.pixel_dim)},
        {"model.variant",
         [&m](const std::string& v, const std::string& k) {
             try {
                 m.variant = parse_variant(v);
             } catch (const std::invalid_argument&) {
                 throw ConfigError("'" + k + "': unknown variant '" + v + "'");
             }
         }},
        {"model.adapter_layers", [&m](const std::string& v, const std::string& k) { m.adapter_layers = detail::parse_layers(v, k); }},
        {"model.rank", sz(m.rank)},
        {"model.mask_ratio", real(m.mask_ratio)},
        {"model.alpha_scale", real(m.alpha_scale)},
        {"model.backbone_seed", u64(m.backbone_seed)},
        {"train.epochs", sz(t.epochs)},
        {"train.warmup", sz(t.warmup)},
        {"train.lr_w", real(t.lr_w)},
        {"train.wd_w", real(t.wd_w)},
        {"train.lr_alpha", real(t.lr_alpha)},
        {"train.wd_alpha", real(t.wd_alpha)},
        {"train.lambda_seg", real(t.loss.seg)},
        {"train.lambda_cls", real(t.loss.cls)},
        {"train.batch", sz(t.batch)},
        {"train.flip_augment", flag(t.flip_augment)},
        {"train.seed", u64(t.seed)},
        {"data.min_shapes", sz(d.min_shapes)},
        {"data.max_shapes", sz(d.max_shapes)},
        {"data.noise_amplitude", real(d.noise_amplitude)},
        {"data.train_size", sz(d.train_size)},
        {"data.val_size", sz(d.val_size)},
        {"data.test_size", sz(d.test_size)},
    };
    std::string section;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto cut = raw.find_first_of("#;");
        const std::string line = detail::trim(cut == std::string::npos ? raw : raw.substr(0, cut));
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (section != "run" && section != "model" && section != "train" && section != "data") {
                throw ConfigError(where + "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside of any section");
        const std::string key = section + "." + detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError(where + "unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
        try {
            it->second(value, key);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        rc.finalize();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return rc;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Canonical text of the effective configuration; parse_config(render_config(c)) == c.
inline std::string render_config(const RunConfig& rc) {
    std::ostringstream os;
    os.precision(17);
    const ModelConfig& m = rc.model;
    const TrainConfig& t = rc.train;
    const DataConfig& d = rc.data;
    std::string layers;
    for (std::size_t l : m.adapter_layers) layers += (layers.empty() ? "" : ",") + std::to_string(l);
    os << "[run]\nname = " << rc.name << "\nout_dir = " << rc.out_dir << "\ncheckpoint_every = " << rc.checkpoint_every
       << "\n\n[model]\nimage_size = " << m.image_size << "\npatch_size = " << m.patch_size
       << "\nembed_dim = " << m.embed_dim << "\ndepth = " << m.depth << "\nheads = " << m.heads
       << "\nmlp_ratio = " << m.mlp_ratio << "\nnum_queries = " << m.num_queries << "\nnum_classes = " << m.num_classes
       << "\ndecoder_dim = " << m.decoder_dim << "\npixel_dim = " << m.pixel_dim << "\nvariant = " << variant_name(m.variant)
       << "\nadapter_layers = " << (layers.empty() ? "all" : layers) << "\nrank = " << m.rank
       << "\nmask_ratio = " << m.mask_ratio << "\nalpha_scale = " << m.alpha_scale
       << "\nbackbone_seed = " << m.backbone_seed << "\n\n[train]\nepochs = " << t.epochs << "\nwarmup = " << t.warmup
       << "\nlr_w = " << t.lr_w << "\nwd_w = " << t.wd_w << "\nlr_alpha = " << t.lr_alpha << "\nwd_alpha = " << t.wd_alpha
       << "\nlambda_seg = " << t.loss.seg << "\nlambda_cls = " << t.loss.cls << "\nbatch = " << t.batch
       << "\nflip_augment = " << (t.flip_augment ? "true" : "false") << "\nseed = " << t.seed
       << "\n\n[data]\nmin_shapes = " << d.min_shapes << "\nmax_shapes = " << d.max_shapes
       << "\nnoise_amplitude = " << d.noise_amplitude << "\ntrain_size = " << d.train_size << "\nval_size = " << d.val_size
       << "\ntest_size = " << d.test_size << "\n";
    return os.str();
}

}  // namespace naslora
