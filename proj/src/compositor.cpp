#include "anom/compositor.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "anom/image.hpp"

namespace anom {

double perlin_fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

PerlinField perlin_noise(int h, int w, int grid_x, int grid_y, Rng& rng) {
    if (h <= 0 || w <= 0) throw ContractError("perlin_noise: empty field");
    if (grid_x < 1 || grid_y < 1) throw ContractError("perlin_noise: grid must be >= 1 per axis");

    // unit gradients at (grid_y+1) x (grid_x+1) lattice points, row-major
    std::vector<double> gx(static_cast<size_t>(grid_y + 1) * (grid_x + 1));
    std::vector<double> gy(gx.size());
    for (size_t i = 0; i < gx.size(); ++i) {
        double a = rng.uniform(0.0, 2.0 * M_PI);
        gx[i] = std::cos(a);
        gy[i] = std::sin(a);
    }
    auto grad_dot = [&](int jx, int jy, double dx, double dy) {
        size_t i = static_cast<size_t>(jy) * (grid_x + 1) + jx;
        return gx[i] * dx + gy[i] * dy;
    };

    PerlinField field;
    field.grid_x = grid_x;
    field.grid_y = grid_y;
    field.values = TensorF::zeros({h, w});
    auto& v = field.values.mutable_data();
    const double norm = std::sqrt(2.0);  // classic 2-D bound is sqrt(2)/2
    for (int py = 0; py < h; ++py) {
        double fy = static_cast<double>(py) * grid_y / h;
        int j0 = std::min(static_cast<int>(fy), grid_y - 1);
        double ty = fy - j0;
        double uy = perlin_fade(ty);
        for (int px = 0; px < w; ++px) {
            double fx = static_cast<double>(px) * grid_x / w;
            int i0 = std::min(static_cast<int>(fx), grid_x - 1);
            double tx = fx - i0;
            double ux = perlin_fade(tx);
            double n00 = grad_dot(i0, j0, tx, ty);
            double n10 = grad_dot(i0 + 1, j0, tx - 1.0, ty);
            double n01 = grad_dot(i0, j0 + 1, tx, ty - 1.0);
            double n11 = grad_dot(i0 + 1, j0 + 1, tx - 1.0, ty - 1.0);
            double top = n00 + ux * (n10 - n00);
            double bot = n01 + ux * (n11 - n01);
            v[static_cast<size_t>(py) * w + px] = static_cast<float>(norm * (top + uy * (bot - top)));
        }
    }
    return field;
}

MaskResult foreground_mask(const TensorF& image) {
    TensorF gray = to_gray(image);
    int h = gray.shape()[1], w = gray.shape()[2];
    size_t n = gray.numel();

    std::array<size_t, 256> hist{};
    for (size_t i = 0; i < n; ++i) {
        int b = static_cast<int>(std::clamp(gray[i], 0.0f, 1.0f) * 255.0f + 0.5f);
        ++hist[static_cast<size_t>(b)];
    }

    int lo = 0, hi = 255;
    while (lo < 255 && hist[lo] == 0) ++lo;
    while (hi > 0 && hist[hi] == 0) --hi;
    if (lo >= hi) {
        MaskResult r;
        r.mask = TensorF::filled({h, w}, 1.0f);
        r.degenerate = true;
        return r;
    }

    // Otsu: threshold maximizing between-class variance over the histogram
    double total_sum = 0;
    for (int b = 0; b < 256; ++b) total_sum += static_cast<double>(b) * hist[b];
    double best = -1.0;
    int thresh = lo;
    size_t w0 = 0;
    double sum0 = 0;
    for (int b = lo; b < hi; ++b) {
        w0 += hist[b];
        sum0 += static_cast<double>(b) * hist[b];
        size_t w1 = n - w0;
        if (w0 == 0 || w1 == 0) continue;
        double m0 = sum0 / w0;
        double m1 = (total_sum - sum0) / w1;
        double var = static_cast<double>(w0) * w1 * (m0 - m1) * (m0 - m1);
        if (var > best) {
            best = var;
            thresh = b;
        }
    }

    std::vector<char> above(n);
    for (size_t i = 0; i < n; ++i)
        above[i] = static_cast<int>(std::clamp(gray[i], 0.0f, 1.0f) * 255.0f + 0.5f) > thresh;

    size_t border_above = 0, border_total = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (y == 0 || y == h - 1 || x == 0 || x == w - 1) {
                ++border_total;
                border_above += above[static_cast<size_t>(y) * w + x];
            }
    bool fg_is_above = border_above * 2 <= border_total;

    MaskResult r;
    r.mask = TensorF::zeros({h, w});
    auto& m = r.mask.mutable_data();
    for (size_t i = 0; i < n; ++i) m[i] = (above[i] == fg_is_above) ? 1.0f : 0.0f;
    return r;
}

MaskResult make_mask(const PerlinField& field, const TensorF& foreground) {
    if (field.values.shape() != foreground.shape())
        throw ShapeError("make_mask: field " + shape_str(field.values.shape()) + " vs foreground " +
                         shape_str(foreground.shape()));
    const auto& v = field.values.data();
    float lo = v[0], hi = v[0];
    for (float x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    MaskResult r;
    r.mask = TensorF::zeros(field.values.shape());
    if (hi - lo < 1e-12f) {
        r.degenerate = true;
        return r;
    }
    auto& m = r.mask.mutable_data();
    for (size_t i = 0; i < v.size(); ++i) {
        float norm = (v[i] - lo) / (hi - lo);
        m[i] = (norm > 0.5f && foreground[i] != 0.0f) ? 1.0f : 0.0f;
    }
    return r;
}

TensorF blend(const TensorF& image, const TensorF& donor, const TensorF& mask, float delta) {
    if (image.shape() != donor.shape())
        throw ShapeError("blend: image " + shape_str(image.shape()) + " vs donor " +
                         shape_str(donor.shape()));
    if (image.shape().size() != 3 || mask.shape().size() != 2 ||
        mask.shape()[0] != image.shape()[1] || mask.shape()[1] != image.shape()[2])
        throw ShapeError("blend: mask " + shape_str(mask.shape()) + " vs image " +
                         shape_str(image.shape()));
    if (delta < 0.0f || delta > 1.0f) throw ContractError("blend: delta outside [0,1]");

    int c = image.shape()[0];
    size_t hw = mask.numel();
    TensorF out = TensorF::zeros(image.shape());
    auto& d = out.mutable_data();
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < hw; ++i) {
            size_t j = static_cast<size_t>(ch) * hw + i;
            // unmasked pixels copy the input bit-exactly
            d[j] = (mask[i] == 0.0f)
                       ? image[j]
                       : std::clamp((1.0f - delta) * image[j] + delta * donor[j], 0.0f, 1.0f);
        }
    return out;
}

namespace {

TensorF match_donor(const TensorF& donor, int c, int h, int w) {
    TensorF d = donor;
    if (d.shape()[0] == 1 && c == 3) d = concat_channels(std::vector<TensorF>{d, d, d});
    else if (d.shape()[0] == 3 && c == 1) d = to_gray(d);
    else if (d.shape()[0] != c) throw ShapeError("donor channel count incompatible with image");
    if (d.shape()[1] != h || d.shape()[2] != w) d = resize_bilinear(d, h, w);
    return d;
}

}  // namespace

AnomalySample synth_sample(const std::vector<TensorF>& normals, const std::vector<TensorF>& donors,
                           const SynthConfig& cfg, size_t index) {
    if (normals.empty()) throw ContractError("synth_sample: no normal images");
    Rng rng = Rng(cfg.seed).split(index + 1);

    AnomalySample s;
    s.normal = normals[rng.next_below(normals.size())];
    int c = s.normal.shape()[0], h = s.normal.shape()[1], w = s.normal.shape()[2];

    double f = cfg.anomaly_fraction;
    bool anomalous = std::floor((index + 1) * f) > std::floor(index * f);
    if (!anomalous) {
        s.blended = s.normal;
        s.mask = TensorF::zeros({h, w});
        return s;
    }
    if (donors.empty()) throw ContractError("synth_sample: no donor images");

    TensorF donor = match_donor(donors[rng.next_below(donors.size())], c, h, w);
    float delta = static_cast<float>(rng.uniform(cfg.delta_lo, cfg.delta_hi));
    MaskResult fg = foreground_mask(s.normal);

    for (int attempt = 0; attempt < std::max(1, cfg.resample_attempts); ++attempt) {
        int gx = cfg.grid_choices[rng.next_below(cfg.grid_choices.size())];
        int gy = cfg.grid_choices[rng.next_below(cfg.grid_choices.size())];
        PerlinField field = perlin_noise(h, w, gx, gy, rng);
        MaskResult m = make_mask(field, fg.mask);
        bool empty = true;
        for (float x : m.mask.data())
            if (x != 0.0f) {
                empty = false;
                break;
            }
        if (empty) continue;
        s.mask = m.mask;
        s.blended = blend(s.normal, donor, s.mask, delta);
        s.delta = delta;
        s.is_anomalous = true;
        return s;
    }
    // every attempt produced an empty mask; fall back to a pure-normal sample
    s.blended = s.normal;
    s.mask = TensorF::zeros({h, w});
    return s;
}

std::vector<AnomalySample> synth_dataset(const std::vector<TensorF>& normals,
                                         const std::vector<TensorF>& donors, const SynthConfig& cfg,
                                         size_t count) {
    std::vector<AnomalySample> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) out.push_back(synth_sample(normals, donors, cfg, i));
    return out;
}

}  // namespace anom
