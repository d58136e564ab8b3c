#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "anom/compositor.hpp"
#include "anom/feature_bank.hpp"
#include "anom/metrics.hpp"
#include "anom/reconstruction.hpp"
#include "anom/rrs.hpp"
#include "anom/tensor.hpp"

namespace anom {

// Error families mapped to CLI exit codes: config 2, missing artifact 3,
// data 4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat typed configuration with schema-checked JSON loading. Unknown keys and
// type mismatches are config errors; every artifact is keyed by the digest of
// the fully resolved document.
struct PipelineConfig {
    std::string dataset_root;
    std::string work_dir;
    std::string category;  // empty = every category found under the root
    bool multiclass = false;
    int image_size = 64;
    int workers = 1;
    uint64_t seed = 0;

    // denoiser training and sampling
    int diffusion_size = 32;
    int diffusion_t = 60;
    std::string diffusion_schedule = "cosine";
    int diffusion_base = 6;
    int diffusion_steps = 5000;
    int diffusion_batch = 4;
    double diffusion_lr = 1e-3;
    std::string sampler_kind = "ddpm";
    double s_min = 0.1;
    double s_max = 0.2;
    int sampler_steps = 0;  // 0 = the full schedule
    int synth_count = 12;

    // blending
    double delta_min = 0.5;
    double delta_max = 1.0;

    // features and selection
    std::vector<int> extractor_widths = {24, 48, 48, 24};
    uint64_t extractor_seed = 1;
    std::vector<int> m = {16, 32, 32, 16};
    int afs_triplets = 32;

    // reconstruction and scoring
    std::string arch = "independent";
    std::string rrs_mode = "max_and_avg";
    double retention = 1.0 / 3.0;
    int train_steps = 4000;
    int train_batch = 2;
    double train_lr = 2e-3;
    double train_lr_d = 1e-2;  // discriminator optimizer
    // synthetic samples whose features are computed once and cycled during
    // training; 0 extracts features fresh for an unbounded sample stream
    int train_pool = 400;

    static PipelineConfig from_file(const std::filesystem::path& path);
    static PipelineConfig from_json_text(const std::string& text);

    // "--set key=value" override on the resolved document
    void apply_override(const std::string& assignment);

    void validate() const;
    std::string digest() const;
    std::string to_json_text() const;

    RRSConfig rrs() const;
    ReconArch recon_arch() const;
};

struct TestImage {
    std::filesystem::path path;
    std::string category;
    std::string defect;  // "good" for normals
    TensorF image;       // (3, s, s)
    TensorF mask;        // (s, s)
    int label = 0;
};

struct Dataset {
    std::vector<TensorF> train;
    std::vector<std::string> train_names;
    std::vector<TestImage> test;
    std::string train_digest;
    std::string test_digest;
};

Dataset load_dataset(const PipelineConfig& cfg);

// Procedural striped-texture benchmark: one category, 200 train normals and
// 100 test images (50 good, 25 square defects, 25 scratch defects) with exact
// masks, written in the standard directory layout.
void generate_toy_benchmark(const std::filesystem::path& root, uint64_t seed,
                            int train_count = 200, int test_defective = 50, int test_good = 50);

struct StageResult {
    std::filesystem::path artifact;
    std::string digest;
    bool cache_hit = false;
};

StageResult cmd_train_diffusion(const PipelineConfig& cfg);
StageResult cmd_synth(const PipelineConfig& cfg);
StageResult cmd_afs(const PipelineConfig& cfg);
StageResult cmd_train(const PipelineConfig& cfg);
EvalReport cmd_eval(const PipelineConfig& cfg, StageResult* stage = nullptr);

}  // namespace anom
