#pragma once

#include <cstdint>
#include <vector>

#include "anom/nn.hpp"
#include "anom/tensor.hpp"

namespace anom {

// How the per-scale reconstruction networks are wired:
//   independent      - one network per scale, no cross-scale resizing
//   neighbor_aligned - ceil(K/2) networks, each over two neighboring scales
//                      with the lower resolution upsampled x2 and concatenated
enum class ReconArch { independent, neighbor_aligned };

// Small encoder-decoder with skip connections; input and output shapes match.
// Two stride-2 stages with channel multiplier 2 and one residual block per
// stage; spatial dims must be divisible by 4.
class ReconNet {
public:
    ReconNet() = default;
    ReconNet(ParamSet<float>& ps, const std::string& name, int channels, Rng& rng);

    TensorF operator()(const TensorF& x) const;

private:
    ResBlock<float> enc0_, enc1_, mid_, dec1_, dec0_;
    Conv3x3<float> down1_, down2_, upc1_, upc0_;
    ChannelDense<float> head_;
};

class ReconstructorSet {
public:
    // edge_pad > 0 wrap-pads each scale before its network and centre-crops
    // the output, so border features are reconstructed from real context
    // instead of the convolution zero padding inside the network
    static ReconstructorSet build(const std::vector<int>& dims, const std::vector<int>& heights,
                                  const std::vector<int>& widths, ReconArch arch, uint64_t seed,
                                  int edge_pad = 0);

    // per-scale reconstructions, same shapes as the inputs
    std::vector<TensorF> reconstruct(const std::vector<TensorF>& feats) const;

    int group_count() const { return static_cast<int>(nets_.size()); }
    int scale_count() const { return static_cast<int>(dims_.size()); }
    ReconArch arch() const { return arch_; }
    // resize operations used to align different scales; always 0 for the
    // independent architecture
    int cross_scale_resize_count() const;

    ParamSet<float>& params() { return params_; }
    const ParamSet<float>& params() const { return params_; }

private:
    ReconstructorSet() = default;

    ReconArch arch_ = ReconArch::independent;
    int edge_pad_ = 0;
    std::vector<int> dims_, heights_, widths_;
    std::vector<ReconNet> nets_;
    ParamSet<float> params_;
};

// One training batch: selected features of the blended and normal images plus
// the masks, each outer index one sample, inner index one scale.
struct ReconBatch {
    std::vector<std::vector<TensorF>> feats_anom;
    std::vector<std::vector<TensorF>> feats_normal;
    std::vector<TensorF> masks;
};

// Sum over scales of the squared reconstruction error, averaged over samples
// only. per_element_mean switches the inner norm to a per-element mean.
TensorF recon_loss(const ReconstructorSet& g, const ReconBatch& batch,
                   bool per_element_mean = false);

}  // namespace anom
