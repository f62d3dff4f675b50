// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <iostream>

#include "naslora/commands.hpp"

using namespace naslora;

namespace {

RunConfig read_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
    RunConfig rc = path.empty() ? parse_config("") : load_config(path);
    if (seed) {
        rc.set_seed(*seed);
        rc.finalize();
    }
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Architecture-searched low-rank adapters on a desk-scale segmentation model"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, out, split = "val", attention_split = "train";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> resume;
    std::size_t trials = 50, samples = 100, count = 4;

    auto* train = app.add_subcommand("train", "Stage-wise training; writes metrics.log and checkpoints");
    train->add_option("--config", config_path, "Run configuration (key = value with [sections])");
    train->add_option("--seed", seed, "Override the configured seed");
    train->add_option("--out", out, "Output directory (default: out_dir from the config)");
    train->add_option("--resume", resume, "Continue from a training checkpoint");

    auto* eval = app.add_subcommand("eval", "Segmentation metrics of a checkpoint");
    eval->add_option("--checkpoint", checkpoint)->required();
    eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));

    auto* merge_cmd = app.add_subcommand("merge", "Fold adapters into the frozen projections");
    merge_cmd->add_option("--checkpoint", checkpoint)->required();
    merge_cmd->add_option("--out", out)->required();

    auto* verify = app.add_subcommand("verify-merge", "Check merged against unmerged forwards");
    verify->add_option("--checkpoint", checkpoint)->required();
    verify->add_option("--trials", trials)->check(CLI::PositiveNumber);

    auto* analyze = app.add_subcommand("analyze", "Op proportions, attention distance and metrics");
    analyze->add_option("--checkpoint", checkpoint)->required();
    analyze->add_option("--split", split, "Split for metrics")->check(CLI::IsMember({"train", "val", "test"}));
    analyze->add_option("--attention-split", attention_split)->check(CLI::IsMember({"train", "val", "test"}));
    analyze->add_option("--samples", samples, "Samples for the attention distance")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-data", "Dump synthetic samples as PGM files");
    gen->add_option("--config", config_path);
    gen->add_option("--seed", seed);
    gen->add_option("--out", out)->required();
    gen->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
    gen->add_option("--count", count);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            if (resume && !config_path.empty()) throw ConfigError("--resume uses the configuration stored in the checkpoint");
            std::optional<std::filesystem::path> from;
            if (resume) from = *resume;
            const RunConfig rc = resume ? RunConfig{} : read_config(config_path, seed);
            std::filesystem::path dir = out.empty() ? std::filesystem::path(rc.out_dir) / rc.name : std::filesystem::path(out);
            if (resume && out.empty()) dir = std::filesystem::path(*resume).parent_path();
            return cmd_train(rc, dir, from, std::cout);
        }
        if (eval->parsed()) return cmd_eval(checkpoint, parse_split(split), std::cout);
        if (merge_cmd->parsed()) return cmd_merge(checkpoint, out, std::cout);
        if (verify->parsed()) return cmd_verify_merge(checkpoint, trials, std::cout);
        if (analyze->parsed()) return cmd_analyze(checkpoint, parse_split(split), parse_split(attention_split), samples, std::cout);
        if (gen->parsed()) return cmd_gen_data(read_config(config_path, seed), out, parse_split(split), count, std::cout);
    } catch (const ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << "\n";
        return kExitInvalidConfig;
    } catch (const DivergenceError& e) {
        std::cerr << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
