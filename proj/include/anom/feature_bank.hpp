#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "anom/compositor.hpp"
#include "anom/nn.hpp"
#include "anom/tensor.hpp"

namespace anom {

// Multi-scale feature pyramid for one image. Layer k has shape (c_k, h_k, w_k)
// with non-increasing spatial size.
struct FeatureStack {
    std::vector<TensorF> layers;
    std::string extractor_id;
    std::string image_ref;
};

struct PyramidConfig {
    int in_channels = 3;
    std::vector<int> widths = {16, 32, 32, 16};
    uint64_t seed = 0;
    // Wrap-pad the input by this many pixels (periodic continuation) and
    // centre-crop each level back to its native size, so border features are
    // computed from real texture instead of the convolution's zero padding.
    // Must be divisible by 2^stages; 0 disables padding.
    int edge_pad = 0;
};

// Deterministic feature source. The builtin kind is a fixed seeded conv
// pyramid (3x3 conv + ReLU, stride 2 per stage); the file kind reads
// precomputed per-layer tensors from disk, keyed by image path.
class FeatureExtractor {
public:
    static FeatureExtractor builtin(const PyramidConfig& cfg);
    static FeatureExtractor file_ingest(std::filesystem::path dir, std::vector<int> channels,
                                        std::string id);

    FeatureStack extract(const TensorF& image, const std::string& image_ref = {}) const;

    const std::string& id() const { return id_; }
    int layer_count() const { return static_cast<int>(channels_.size()); }
    int channels(int k) const { return channels_.at(static_cast<size_t>(k)); }

    // builtin weights; fixed (no gradients) but replaceable in tests
    ParamSet<float>& params() { return params_; }

private:
    FeatureExtractor() = default;

    bool builtin_ = false;
    std::string id_;
    std::vector<int> channels_;
    std::filesystem::path dir_;
    ParamSet<float> params_;
    std::vector<Conv3x3<float>> stages_;
    int edge_pad_ = 0;
};

// Per-layer channel choice: indices in ascending score order with the scores
// that ranked them, plus provenance to detect stale caches.
struct AFSIndexCache {
    std::string extractor_id;
    std::string digest;
    std::vector<int> m;
    std::vector<std::vector<int>> indices;
    std::vector<std::vector<double>> losses;
};

// Order-insensitive over bytes but order-sensitive over the sample sequence;
// identifies the triplet set a selection was computed from.
std::string triplet_digest(const std::vector<AnomalySample>& triplets);

// Mean over triplets of the per-pixel squared deviation between the aligned
// normalized difference map of channel (layer, channel) and the mask. The
// alignment resizes the squared feature difference to mask resolution and
// min-max normalizes it per map (1e-12 range guard).
double afs_score(const FeatureExtractor& ex, int layer, int channel,
                 const std::vector<AnomalySample>& triplets);

// Per layer: rank channels by score ascending (ties to the lower index) and
// keep the first m[k]. With a cache path, a file whose provenance matches is
// returned as-is; otherwise the result is recomputed and atomically saved.
AFSIndexCache afs_select(const FeatureExtractor& ex, const std::vector<AnomalySample>& triplets,
                         const std::vector<int>& m, const std::filesystem::path& cache_path = {});

void save_afs_cache(const std::filesystem::path& path, const AFSIndexCache& cache);
AFSIndexCache load_afs_cache(const std::filesystem::path& path);

// Pure channel gather in cached order; values pass through untouched.
FeatureStack apply_selection(const FeatureStack& stack, const AFSIndexCache& cache);

}  // namespace anom
