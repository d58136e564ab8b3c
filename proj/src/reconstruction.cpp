#include "anom/reconstruction.hpp"

namespace anom {

ReconNet::ReconNet(ParamSet<float>& ps, const std::string& name, int channels, Rng& rng) {
    int f = std::max(4, channels);
    enc0_ = ResBlock<float>(ps, name + ".e0", channels, f, rng);
    down1_ = Conv3x3<float>(ps, name + ".d1", f, 2 * f, 2, rng);
    enc1_ = ResBlock<float>(ps, name + ".e1", 2 * f, 2 * f, rng);
    down2_ = Conv3x3<float>(ps, name + ".d2", 2 * f, 4 * f, 2, rng);
    mid_ = ResBlock<float>(ps, name + ".mid", 4 * f, 4 * f, rng);
    upc1_ = Conv3x3<float>(ps, name + ".u1", 4 * f, 2 * f, 1, rng);
    dec1_ = ResBlock<float>(ps, name + ".c1", 4 * f, 2 * f, rng);
    upc0_ = Conv3x3<float>(ps, name + ".u0", 2 * f, f, 1, rng);
    dec0_ = ResBlock<float>(ps, name + ".c0", 2 * f, f, rng);
    head_ = ChannelDense<float>(ps, name + ".head", f, channels, rng);
}

TensorF ReconNet::operator()(const TensorF& x) const {
    if (x.shape().size() != 3 || x.shape()[1] % 4 != 0 || x.shape()[2] % 4 != 0)
        throw ShapeError("reconstruction input must be (C,H,W) with H, W divisible by 4, got " +
                         shape_str(x.shape()));
    TensorF e0 = enc0_(x);
    TensorF e1 = enc1_(relu(down1_(e0)));
    TensorF m = mid_(relu(down2_(e1)));
    TensorF c1 = dec1_(concat_channels(std::vector<TensorF>{upc1_(resize_nearest(m, 2)), e1}));
    TensorF c0 = dec0_(concat_channels(std::vector<TensorF>{upc0_(resize_nearest(c1, 2)), e0}));
    return head_(c0);
}

ReconstructorSet ReconstructorSet::build(const std::vector<int>& dims,
                                         const std::vector<int>& heights,
                                         const std::vector<int>& widths, ReconArch arch,
                                         uint64_t seed, int edge_pad) {
    if (dims.empty() || dims.size() != heights.size() || dims.size() != widths.size())
        throw ContractError("reconstructor build: per-scale lists must be non-empty and aligned");
    for (size_t k = 0; k < dims.size(); ++k)
        if (dims[k] < 1 || heights[k] < 4 || widths[k] < 4)
            throw ContractError("reconstructor build: scale " + std::to_string(k) +
                                " has non-positive or too-small extents");
    if (edge_pad < 0 || edge_pad % 4 != 0)
        throw ContractError("reconstructor edge pad must be a non-negative multiple of 4");

    ReconstructorSet set;
    set.arch_ = arch;
    set.edge_pad_ = edge_pad;
    set.dims_ = dims;
    set.heights_ = heights;
    set.widths_ = widths;
    Rng rng = Rng(seed).split(0x9ec0);

    if (arch == ReconArch::independent || dims.size() == 1) {
        for (size_t k = 0; k < dims.size(); ++k)
            set.nets_.emplace_back(set.params_, "g" + std::to_string(k), dims[k], rng);
        if (dims.size() == 1) set.arch_ = arch;  // single scale: both wirings coincide
        return set;
    }
    if (arch != ReconArch::neighbor_aligned) throw ContractError("unsupported architecture tag");
    for (size_t j = 0; 2 * j < dims.size(); ++j) {
        size_t lo = 2 * j, hi = 2 * j + 1;
        int c = dims[lo] + (hi < dims.size() ? dims[hi] : 0);
        if (hi < dims.size() && (heights[lo] != 2 * heights[hi] || widths[lo] != 2 * widths[hi]))
            throw ContractError("neighbor-aligned scales must differ by exactly a factor of 2");
        set.nets_.emplace_back(set.params_, "g" + std::to_string(j), c, rng);
    }
    return set;
}

std::vector<TensorF> ReconstructorSet::reconstruct(const std::vector<TensorF>& feats) const {
    if (feats.size() != dims_.size()) throw ContractError("scale count mismatch");
    for (size_t k = 0; k < feats.size(); ++k)
        if (feats[k].shape() != Shape{dims_[k], heights_[k], widths_[k]})
            throw ShapeError("scale " + std::to_string(k) + " shape " + shape_str(feats[k].shape()) +
                             " does not match the configured extent");

    auto run = [this](const ReconNet& net, const TensorF& in) {
        return edge_pad_ > 0 ? crop_center(net(pad_wrap(in, edge_pad_)), edge_pad_) : net(in);
    };

    std::vector<TensorF> out(feats.size());
    if (arch_ == ReconArch::independent || feats.size() == 1) {
        for (size_t k = 0; k < feats.size(); ++k) out[k] = run(nets_[k], feats[k]);
        return out;
    }
    for (size_t j = 0; j < nets_.size(); ++j) {
        size_t lo = 2 * j, hi = 2 * j + 1;
        if (hi >= feats.size()) {
            out[lo] = run(nets_[j], feats[lo]);
            break;
        }
        TensorF joint = run(nets_[j],
            concat_channels(std::vector<TensorF>{feats[lo], resize_nearest(feats[hi], 2)}));
        out[lo] = slice_channels(joint, 0, dims_[lo]);
        out[hi] = resize_bilinear(slice_channels(joint, dims_[lo], dims_[lo] + dims_[hi]),
                                  heights_[hi], widths_[hi]);
    }
    return out;
}

int ReconstructorSet::cross_scale_resize_count() const {
    if (arch_ == ReconArch::independent || dims_.size() == 1) return 0;
    // one upsample into each paired network plus one downsample out of it
    return 2 * static_cast<int>(dims_.size() / 2);
}

TensorF recon_loss(const ReconstructorSet& g, const ReconBatch& batch, bool per_element_mean) {
    size_t n = batch.feats_anom.size();
    if (n == 0 || batch.feats_normal.size() != n)
        throw ContractError("reconstruction batch is empty or misaligned");
    TensorF acc = TensorF::scalar(0.0f);
    for (size_t i = 0; i < n; ++i) {
        auto recon = g.reconstruct(batch.feats_anom[i]);
        for (size_t k = 0; k < recon.size(); ++k) {
            TensorF err = square(sub(recon[k], batch.feats_normal[i][k]));
            acc = add(acc, per_element_mean ? mean_all(err) : sum_all(err));
        }
    }
    return mul_scalar(acc, 1.0f / static_cast<float>(n));
}

}  // namespace anom
