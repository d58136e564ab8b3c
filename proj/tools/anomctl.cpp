#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "anom/metrics.hpp"
#include "anom/pipeline.hpp"
#include "anom/serialize.hpp"
#include "anom/tensor.hpp"

namespace fs = std::filesystem;

namespace {

struct Cli {
    std::string config_path;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    int workers = 0;
};

anom::PipelineConfig resolve_config(const Cli& cli) {
    anom::PipelineConfig cfg;
    if (!cli.config_path.empty()) cfg = anom::PipelineConfig::from_file(cli.config_path);
    for (const auto& ov : cli.overrides) cfg.apply_override(ov);
    if (cli.seed >= 0) cfg.seed = static_cast<uint64_t>(cli.seed);
    if (cli.workers > 0) cfg.workers = cli.workers;
    cfg.validate();
    return cfg;
}

void print_stage(const char* stage, const anom::StageResult& r) {
    std::cout << stage << ": " << (r.cache_hit ? "cache hit" : "computed") << " -> "
              << r.artifact.string() << " (digest " << r.digest << ")\n";
}

int run_benchmark(anom::PipelineConfig cfg) {
    if (cfg.work_dir.empty()) throw anom::ConfigError("benchmark needs work_dir to be set");
    if (cfg.dataset_root.empty()) {
        fs::path root = fs::path(cfg.work_dir) / "toy-dataset";
        if (!fs::exists(root / "texture" / "train" / "good"))
            anom::generate_toy_benchmark(root, cfg.seed);
        cfg.dataset_root = root.string();
    }
    print_stage("train-diffusion", anom::cmd_train_diffusion(cfg));
    print_stage("synth", anom::cmd_synth(cfg));
    print_stage("afs", anom::cmd_afs(cfg));
    print_stage("train", anom::cmd_train(cfg));
    anom::StageResult er;
    anom::EvalReport rep = anom::cmd_eval(cfg, &er);
    print_stage("eval", er);
    std::cout << rep.to_table();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"self-supervised anomaly detection pipeline"};
    app.require_subcommand(1);
    app.fallthrough();  // global options may follow the subcommand

    Cli cli;
    app.add_option("--config", cli.config_path, "JSON configuration file");
    app.add_option("--set", cli.overrides, "key=value override, repeatable");
    app.add_option("--seed", cli.seed, "override the base seed");
    app.add_option("--workers", cli.workers, "worker count");

    auto* c_diff = app.add_subcommand("train-diffusion", "fit the denoiser on normal images");
    auto* c_synth = app.add_subcommand("synth", "sample anomaly donor textures");
    auto* c_afs = app.add_subcommand("afs", "select anomaly-sensitive feature channels");
    auto* c_train = app.add_subcommand("train", "fit reconstructors and discriminator");
    auto* c_eval = app.add_subcommand("eval", "score the test split and write reports");
    auto* c_bench = app.add_subcommand("benchmark", "generate the toy dataset and run everything");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        anom::PipelineConfig cfg = resolve_config(cli);
        if (c_diff->parsed()) {
            print_stage("train-diffusion", anom::cmd_train_diffusion(cfg));
        } else if (c_synth->parsed()) {
            print_stage("synth", anom::cmd_synth(cfg));
        } else if (c_afs->parsed()) {
            print_stage("afs", anom::cmd_afs(cfg));
        } else if (c_train->parsed()) {
            print_stage("train", anom::cmd_train(cfg));
        } else if (c_eval->parsed()) {
            anom::StageResult er;
            anom::EvalReport rep = anom::cmd_eval(cfg, &er);
            print_stage("eval", er);
            std::cout << rep.to_table();
        } else if (c_bench->parsed()) {
            return run_benchmark(cfg);
        }
        return 0;
    } catch (const anom::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const anom::ArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 3;
    } catch (const anom::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const anom::IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const anom::MetricError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
