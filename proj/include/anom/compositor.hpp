#pragma once

#include <cstdint>
#include <vector>

#include "anom/rng.hpp"
#include "anom/tensor.hpp"

namespace anom {

// Gradient-lattice noise field over (h, w). Values lie in [-1, 1] and are
// exactly zero at lattice corners. Deterministic given (shape, grid, seed).
struct PerlinField {
    TensorF values;  // (h, w)
    int grid_x = 0;
    int grid_y = 0;
    uint64_t seed = 0;
};

PerlinField perlin_noise(int h, int w, int grid_x, int grid_y, Rng& rng);

// Quintic fade 6t^5 - 15t^4 + 10t^3; zero slope at both ends.
double perlin_fade(double t);

// Binary mask with a degenerate-input flag.
struct MaskResult {
    TensorF mask;  // (h, w) in {0, 1}
    bool degenerate = false;
};

// Otsu binarization of the grayscale image; the side with the smaller
// border-pixel occupancy is foreground. A constant image yields an all-ones
// mask with the degenerate flag set.
MaskResult foreground_mask(const TensorF& image);

// Min-max normalize the field to [0,1], threshold at 0.5, intersect with the
// foreground. A constant field yields an empty mask with the flag set.
MaskResult make_mask(const PerlinField& field, const TensorF& foreground);

// A = (1-M) I + (1-delta) M I + delta M P, clamped to [0,1]. Pixels outside
// the mask copy I exactly.
TensorF blend(const TensorF& image, const TensorF& donor, const TensorF& mask, float delta);

struct AnomalySample {
    TensorF blended;   // A, (c, h, w)
    TensorF normal;    // I, (c, h, w)
    TensorF mask;      // M, (h, w) in {0, 1}
    float delta = 0.0f;
    bool is_anomalous = false;
    // provenance keys for feature sources that read from disk
    std::string blended_ref;
    std::string normal_ref;
};

struct SynthConfig {
    double delta_lo = 0.5;
    double delta_hi = 1.0;
    std::vector<int> grid_choices = {2, 4, 8, 16};
    int resample_attempts = 8;
    double anomaly_fraction = 0.5;  // 0.5 interleaves normal and anomalous 1:1
    uint64_t seed = 0;
};

// Stateless per index: sample i is fully determined by (inputs, config, i),
// so generation parallelizes over indices. Donors are resized to the normal
// image's resolution when they differ.
AnomalySample synth_sample(const std::vector<TensorF>& normals, const std::vector<TensorF>& donors,
                           const SynthConfig& cfg, size_t index);

std::vector<AnomalySample> synth_dataset(const std::vector<TensorF>& normals,
                                         const std::vector<TensorF>& donors, const SynthConfig& cfg,
                                         size_t count);

}  // namespace anom
