#include "anom/rrs.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace anom {

namespace {
constexpr double kStatEps = 1e-5;
}

TensorF ResidualStandardizer::apply(const TensorF& x, bool training) {
    if (x.shape().size() != 3) throw ShapeError("standardizer expects (C,H,W)");
    int c = x.shape()[0];
    size_t hw = static_cast<size_t>(x.shape()[1]) * x.shape()[2];
    if (!mean_.empty() && static_cast<int>(mean_.size()) != c)
        throw ContractError("standardizer channel count changed");

    std::vector<double> use_mean(static_cast<size_t>(c)), use_var(static_cast<size_t>(c));
    if (training) {
        for (int ch = 0; ch < c; ++ch) {
            double s = 0, sq = 0;
            for (size_t i = 0; i < hw; ++i) {
                double v = x[static_cast<size_t>(ch) * hw + i];
                s += v;
                sq += v * v;
            }
            double m = s / static_cast<double>(hw);
            use_mean[static_cast<size_t>(ch)] = m;
            use_var[static_cast<size_t>(ch)] = std::max(0.0, sq / static_cast<double>(hw) - m * m);
        }
        if (!seen_) {
            mean_ = use_mean;
            var_ = use_var;
            seen_ = true;
        } else {
            for (int ch = 0; ch < c; ++ch) {
                mean_[static_cast<size_t>(ch)] = (1.0 - momentum_) * mean_[static_cast<size_t>(ch)] +
                                                 momentum_ * use_mean[static_cast<size_t>(ch)];
                var_[static_cast<size_t>(ch)] = (1.0 - momentum_) * var_[static_cast<size_t>(ch)] +
                                                momentum_ * use_var[static_cast<size_t>(ch)];
            }
        }
    } else {
        if (!seen_) throw ContractError("standardizer used in eval mode before any training pass");
        use_mean = mean_;
        use_var = var_;
    }

    // constant diagonal affine; gradients flow through x only
    TensorF w = TensorF::zeros({c, c});
    TensorF b = TensorF::zeros({c});
    for (int ch = 0; ch < c; ++ch) {
        double sd = std::sqrt(use_var[static_cast<size_t>(ch)] + kStatEps);
        w.mutable_data()[static_cast<size_t>(ch) * c + ch] = static_cast<float>(1.0 / sd);
        b.mutable_data()[static_cast<size_t>(ch)] =
            static_cast<float>(-use_mean[static_cast<size_t>(ch)] / sd);
    }
    return affine_channels(x, w, b);
}

void ResidualStandardizer::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["momentum"] = momentum_;
    j["seen"] = seen_;
    j["mean"] = mean_;
    j["var"] = var_;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

void ResidualStandardizer::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    is >> j;
    momentum_ = j.at("momentum").get<double>();
    seen_ = j.at("seen").get<bool>();
    mean_ = j.at("mean").get<std::vector<double>>();
    var_ = j.at("var").get<std::vector<double>>();
}

ResidualStack assemble_residuals(const std::vector<TensorF>& selected,
                                 const std::vector<TensorF>& reconstructed,
                                 ResidualStandardizer& stats, bool training) {
    if (selected.empty() || selected.size() != reconstructed.size())
        throw ContractError("residual assembly: scale lists empty or misaligned");
    ResidualStack stack;
    int hp = 0, wp = 0;
    for (size_t k = 0; k < selected.size(); ++k) {
        if (selected[k].shape() != reconstructed[k].shape())
            throw ShapeError("residual assembly: scale " + std::to_string(k) + " shape mismatch");
        stack.per_scale.push_back(square(sub(selected[k], reconstructed[k])));
        hp = std::max(hp, selected[k].shape()[1]);
        wp = std::max(wp, selected[k].shape()[2]);
    }
    std::vector<TensorF> up;
    // log1p compresses the heavy-tailed squared errors so that residuals far
    // stronger than anything seen in training still land inside the
    // discriminator's input range instead of forcing it to extrapolate
    for (const auto& e : stack.per_scale)
        up.push_back(log(add_scalar(resize_bilinear(e, hp, wp), 1.0f)));
    // bounded embedding: residuals far beyond anything seen in training clip
    // to the most extreme training value instead of exercising the
    // discriminator outside its fitted range
    stack.assembled = clamp(stats.apply(concat_channels(up), training), -8.0f, 8.0f);
    return stack;
}

int RRSConfig::r_for(int total_channels) const {
    if (retention <= 0.0 || retention > 1.0) throw ContractError("retention ratio outside (0, 1]");
    int r = static_cast<int>(std::lround(retention * total_channels));
    r = std::max(1, r);
    if (mode == RRSMode::max_and_avg) {
        if (r % 2 != 0) ++r;
        if (r > total_channels) r -= 2;
        r = std::max(2, r);
    }
    if (r > total_channels) throw ContractError("retained channel count exceeds the stack");
    return r;
}

namespace {

std::vector<int> top_by(const std::vector<double>& stat, int count) {
    std::vector<int> order(stat.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return stat[static_cast<size_t>(a)] > stat[static_cast<size_t>(b)];
    });
    order.resize(static_cast<size_t>(count));
    return order;
}

}  // namespace

std::vector<int> rrs_indices(const TensorF& assembled, const RRSConfig& cfg) {
    if (assembled.shape().size() != 3) throw ShapeError("residual stack must be (C,H,W)");
    int c = assembled.shape()[0];
    size_t hw = static_cast<size_t>(assembled.shape()[1]) * assembled.shape()[2];
    int r = cfg.r_for(c);

    std::vector<double> gmp(static_cast<size_t>(c)), gap(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double mx = assembled[static_cast<size_t>(ch) * hw];
        double s = 0;
        for (size_t i = 0; i < hw; ++i) {
            double v = assembled[static_cast<size_t>(ch) * hw + i];
            mx = std::max(mx, v);
            s += v;
        }
        gmp[static_cast<size_t>(ch)] = mx;
        gap[static_cast<size_t>(ch)] = s / static_cast<double>(hw);
    }

    if (cfg.mode == RRSMode::max) return top_by(gmp, r);
    if (cfg.mode == RRSMode::avg) return top_by(gap, r);
    std::vector<int> idx = top_by(gmp, r / 2);
    std::vector<int> avg_half = top_by(gap, r / 2);
    idx.insert(idx.end(), avg_half.begin(), avg_half.end());  // duplicates kept
    return idx;
}

TensorF rrs_select(const TensorF& assembled, const RRSConfig& cfg) {
    return gather_channels(assembled, rrs_indices(assembled, cfg));
}

Discriminator::Discriminator(int in_channels, int hidden, uint64_t seed)
    : in_channels_(in_channels) {
    Rng rng = Rng(seed).split(0xd15c);
    h1_ = ChannelDense<float>(params_, "h1", in_channels, hidden, rng);
    h2_ = ChannelDense<float>(params_, "h2", hidden, hidden, rng);
    out_ = ChannelDense<float>(params_, "out", hidden, 1, rng, /*zero_init=*/true);
}

TensorF Discriminator::logits(const TensorF& e_rrs) const {
    if (e_rrs.shape().size() != 3 || e_rrs.shape()[0] != in_channels_)
        throw ShapeError("discriminator expects " + std::to_string(in_channels_) +
                         " channels, got " + shape_str(e_rrs.shape()));
    return out_(relu(h2_(relu(h1_(e_rrs)))));
}

ScoreMap discriminate(const Discriminator& d, const TensorF& e_rrs, int out_h, int out_w) {
    TensorF prob = sigmoid(d.logits(e_rrs));
    ScoreMap map;
    map.pixel = resize_bilinear(prob, out_h, out_w);
    float mx = map.pixel[0];
    for (float v : map.pixel.data()) mx = std::max(mx, v);
    map.image_score = mx;
    return map;
}

TensorF seg_loss(const TensorF& logits, const TensorF& mask) {
    if (logits.shape().size() != 3 || logits.shape()[0] != 1)
        throw ShapeError("seg loss expects (1,H,W) logits");
    if (mask.shape().size() != 2) throw ShapeError("seg loss expects an (H,W) mask");
    int hs = logits.shape()[1], ws = logits.shape()[2];
    int hm = mask.shape()[0], wm = mask.shape()[1];

    TensorF m = TensorF::zeros({1, hs, ws});
    TensorF inv = TensorF::zeros({1, hs, ws});
    for (int y = 0; y < hs; ++y)
        for (int x = 0; x < ws; ++x) {
            int sy = std::min(hm - 1, y * hm / hs);
            int sx = std::min(wm - 1, x * wm / ws);
            float v = mask[static_cast<size_t>(sy) * wm + sx] != 0.0f ? 1.0f : 0.0f;
            m.mutable_data()[static_cast<size_t>(y) * ws + x] = v;
            inv.mutable_data()[static_cast<size_t>(y) * ws + x] = 1.0f - v;
        }

    TensorF p = clamp(sigmoid(logits), 1e-7f, 1.0f - 1e-7f);
    TensorF one = TensorF::filled(p.shape(), 1.0f);
    TensorF ll = add(mul(m, log(p)), mul(inv, log(sub(one, p))));
    return neg(mean_all(ll));
}

PipelineStepResult train_pipeline_step(ReconstructorSet& g, Discriminator& d,
                                       ResidualStandardizer& stats, const ReconBatch& batch,
                                       const RRSConfig& rrs, AdamOptimizer<float>& opt_g,
                                       AdamOptimizer<float>& opt_d, bool per_element_mean) {
    size_t n = batch.feats_anom.size();
    if (n == 0 || batch.masks.size() != n || batch.feats_normal.size() != n)
        throw ContractError("pipeline batch empty or misaligned");

    g.params().zero_grad();
    d.params().zero_grad();

    TensorF lrec = TensorF::scalar(0.0f);
    TensorF lseg = TensorF::scalar(0.0f);
    for (size_t i = 0; i < n; ++i) {
        auto recon = g.reconstruct(batch.feats_anom[i]);
        for (size_t k = 0; k < recon.size(); ++k) {
            TensorF err = square(sub(recon[k], batch.feats_normal[i][k]));
            lrec = add(lrec, per_element_mean ? mean_all(err) : sum_all(err));
        }
        ResidualStack stack = assemble_residuals(batch.feats_anom[i], recon, stats, true);
        TensorF sel = rrs_select(stack.assembled, rrs);
        lseg = add(lseg, seg_loss(d.logits(sel), batch.masks[i]));
    }
    float inv_n = 1.0f / static_cast<float>(n);
    lrec = mul_scalar(lrec, inv_n);
    lseg = mul_scalar(lseg, inv_n);

    TensorF total = add(lrec, lseg);
    total.backward();
    opt_g.step(g.params());
    opt_d.step(d.params());

    return {static_cast<double>(lrec.item()), static_cast<double>(lseg.item())};
}

}  // namespace anom
