#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "anom/nn.hpp"
#include "anom/reconstruction.hpp"
#include "anom/tensor.hpp"

namespace anom {

// Per-channel running mean/variance, no learned affine. Training-mode calls
// fold the batch statistics in with the given momentum; eval mode uses the
// frozen values.
class ResidualStandardizer {
public:
    explicit ResidualStandardizer(double momentum = 0.1) : momentum_(momentum) {}

    // x: (C, H, W); statistics are treated as constants, so no gradient
    // flows through the running estimates themselves
    TensorF apply(const TensorF& x, bool training);

    const std::vector<double>& mean() const { return mean_; }
    const std::vector<double>& variance() const { return var_; }

    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

private:
    double momentum_;
    bool seen_ = false;
    std::vector<double> mean_, var_;
};

// Squared reconstruction errors per scale, upsampled to the largest scale's
// resolution and concatenated layer-major.
struct ResidualStack {
    std::vector<TensorF> per_scale;  // E_k, (m_k, h_k, w_k)
    TensorF assembled;               // (sum m_k, h', w'), standardized
};

ResidualStack assemble_residuals(const std::vector<TensorF>& selected,
                                 const std::vector<TensorF>& reconstructed,
                                 ResidualStandardizer& stats, bool training);

enum class RRSMode { max, avg, max_and_avg };

struct RRSConfig {
    RRSMode mode = RRSMode::max_and_avg;
    double retention = 1.0 / 3.0;  // P; r = round(P * m'), forced even for max_and_avg

    int r_for(int total_channels) const;
};

// Channel choice by global pooling statistics: r channels by descending max,
// by descending mean, or the two r/2 halves concatenated (duplicates kept).
// Ties break toward the lower channel index.
std::vector<int> rrs_indices(const TensorF& assembled, const RRSConfig& cfg);
TensorF rrs_select(const TensorF& assembled, const RRSConfig& cfg);

// Per-pixel MLP over the selected residual channels; sigmoid scores.
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(int in_channels, int hidden, uint64_t seed);

    // raw pre-sigmoid map, (1, h', w')
    TensorF logits(const TensorF& e_rrs) const;

    int in_channels() const { return in_channels_; }
    ParamSet<float>& params() { return params_; }
    const ParamSet<float>& params() const { return params_; }

private:
    int in_channels_ = 0;
    ParamSet<float> params_;
    ChannelDense<float> h1_, h2_, out_;
};

struct ScoreMap {
    TensorF pixel;             // (1, h, w), sigmoid scores in [0, 1]
    float image_score = 0.0f;  // max over pixels
};

ScoreMap discriminate(const Discriminator& d, const TensorF& e_rrs, int out_h, int out_w);

// Mean binary cross-entropy between sigmoid(logits) and the mask, which is
// nearest-downsampled to the logits' resolution. Probabilities clamp to
// [1e-7, 1 - 1e-7].
TensorF seg_loss(const TensorF& logits, const TensorF& mask);

// One joint gradient step on recon + segmentation loss over a batch.
struct PipelineStepResult {
    double recon = 0.0;
    double seg = 0.0;
};

PipelineStepResult train_pipeline_step(ReconstructorSet& g, Discriminator& d,
                                       ResidualStandardizer& stats, const ReconBatch& batch,
                                       const RRSConfig& rrs, AdamOptimizer<float>& opt_g,
                                       AdamOptimizer<float>& opt_d,
                                       bool per_element_mean = false);

}  // namespace anom
