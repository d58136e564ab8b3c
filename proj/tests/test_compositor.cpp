#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "anom/compositor.hpp"

using namespace anom;

TEST_CASE("fade curve endpoints, midpoint, and flat tangents") {
    CHECK(perlin_fade(0.0) == 0.0);
    CHECK(perlin_fade(1.0) == 1.0);
    CHECK(perlin_fade(0.5) == doctest::Approx(0.5));
    auto dfade = [](double t) { return 30.0 * t * t * (t * t - 2.0 * t + 1.0); };
    CHECK(dfade(0.0) == 0.0);
    CHECK(dfade(1.0) == 0.0);
    const double eps = 1e-6;
    CHECK(std::abs(perlin_fade(eps) - perlin_fade(0.0)) / eps < 1e-4);
    CHECK(std::abs(perlin_fade(1.0) - perlin_fade(1.0 - eps)) / eps < 1e-4);
}

TEST_CASE("gradient noise: lattice zeros, determinism, bounds") {
    const int h = 16, w = 16, g = 4;
    Rng r1(11), r2(11);
    PerlinField a = perlin_noise(h, w, g, g, r1);
    PerlinField b = perlin_noise(h, w, g, g, r2);
    CHECK(a.values.data() == b.values.data());

    for (int y = 0; y < h; y += h / g)
        for (int x = 0; x < w; x += w / g)
            CHECK(a.values[static_cast<size_t>(y) * w + x] == 0.0f);

    bool nonzero = false;
    for (float v : a.values.data()) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
        if (v != 0.0f) nonzero = true;
    }
    CHECK(nonzero);

    Rng r3(12);
    CHECK_THROWS_AS(perlin_noise(0, 4, 2, 2, r3), ContractError);
    CHECK_THROWS_AS(perlin_noise(4, 4, 0, 2, r3), ContractError);
}

TEST_CASE("foreground from a pure two-level image is the object support") {
    const int h = 12, w = 12;
    TensorF img = TensorF::filled({1, h, w}, 0.1f);
    auto& d = img.mutable_data();
    for (int y = 3; y < 8; ++y)
        for (int x = 4; x < 9; ++x) d[static_cast<size_t>(y) * w + x] = 0.9f;
    MaskResult fg = foreground_mask(img);
    CHECK_FALSE(fg.degenerate);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            bool inside = y >= 3 && y < 8 && x >= 4 && x < 9;
            CHECK(fg.mask[static_cast<size_t>(y) * w + x] == (inside ? 1.0f : 0.0f));
        }
}

TEST_CASE("foreground polarity follows border occupancy, not brightness") {
    // dark object on a bright ground: the below-threshold side is foreground
    const int h = 12, w = 12;
    TensorF img = TensorF::filled({1, h, w}, 0.85f);
    auto& d = img.mutable_data();
    for (int y = 4; y < 9; ++y)
        for (int x = 2; x < 7; ++x) d[static_cast<size_t>(y) * w + x] = 0.15f;
    MaskResult fg = foreground_mask(img);
    CHECK(fg.mask[static_cast<size_t>(5) * w + 4] == 1.0f);
    CHECK(fg.mask[0] == 0.0f);
}

TEST_CASE("constant image yields an all-ones foreground with the degenerate flag") {
    MaskResult fg = foreground_mask(TensorF::filled({3, 6, 6}, 0.42f));
    CHECK(fg.degenerate);
    for (float v : fg.mask.data()) CHECK(v == 1.0f);
}

TEST_CASE("noisy disc segments with IoU at least 0.95") {
    const int h = 64, w = 64;
    Rng rng(2025);
    TensorF img = TensorF::zeros({1, h, w});
    std::vector<char> truth(static_cast<size_t>(h) * w);
    auto& d = img.mutable_data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double dy = y - 31.5, dx = x - 31.5;
            bool in = dy * dy + dx * dx <= 20.0 * 20.0;
            truth[static_cast<size_t>(y) * w + x] = in;
            float base = in ? 0.8f : 0.1f;
            float noisy = base + 0.02f * static_cast<float>(rng.normal());
            d[static_cast<size_t>(y) * w + x] = std::clamp(noisy, 0.0f, 1.0f);
        }
    MaskResult fg = foreground_mask(img);
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
        bool p = fg.mask[i] != 0.0f;
        inter += p && truth[i];
        uni += p || truth[i];
    }
    CHECK(static_cast<double>(inter) / uni >= 0.95);
}

TEST_CASE("mask construction: degenerate field, intersection, threshold monotonicity") {
    TensorF fg_all = TensorF::filled({8, 8}, 1.0f);

    SUBCASE("constant field gives an empty mask with the flag") {
        PerlinField f;
        f.values = TensorF::filled({8, 8}, 0.3f);
        MaskResult m = make_mask(f, fg_all);
        CHECK(m.degenerate);
        for (float v : m.mask.data()) CHECK(v == 0.0f);
    }
    SUBCASE("all-zero foreground forces an empty mask") {
        Rng rng(5);
        PerlinField f = perlin_noise(8, 8, 2, 2, rng);
        MaskResult m = make_mask(f, TensorF::zeros({8, 8}));
        for (float v : m.mask.data()) CHECK(v == 0.0f);
    }
    SUBCASE("raising the binarization threshold never grows the mask") {
        Rng rng(6);
        PerlinField f = perlin_noise(16, 16, 4, 4, rng);
        MaskResult m = make_mask(f, TensorF::filled({16, 16}, 1.0f));
        const auto& v = f.values.data();
        float lo = *std::min_element(v.begin(), v.end());
        float hi = *std::max_element(v.begin(), v.end());
        for (size_t i = 0; i < v.size(); ++i) {
            float norm = (v[i] - lo) / (hi - lo);
            if (norm > 0.7f) CHECK(m.mask[i] == 1.0f);  // above a higher cut implies masked
            if (m.mask[i] == 1.0f) CHECK(norm > 0.5f);
        }
    }
    SUBCASE("shape mismatch rejected") {
        PerlinField f;
        f.values = TensorF::zeros({4, 4});
        CHECK_THROWS_AS(make_mask(f, TensorF::zeros({5, 5})), ShapeError);
    }
}

TEST_CASE("opacity blending") {
    Rng rng(7);
    TensorF img = TensorF::zeros({3, 4, 4});
    TensorF donor = TensorF::zeros({3, 4, 4});
    for (auto& v : img.mutable_data()) v = std::clamp(static_cast<float>(rng.uniform()), 0.0f, 1.0f);
    for (auto& v : donor.mutable_data()) v = std::clamp(static_cast<float>(rng.uniform()), 0.0f, 1.0f);
    TensorF mask = TensorF::zeros({4, 4});
    mask.mutable_data()[5] = 1.0f;
    mask.mutable_data()[10] = 1.0f;

    SUBCASE("delta = 0 copies the image") {
        CHECK(blend(img, donor, mask, 0.0f).data() == img.data());
    }
    SUBCASE("full mask at delta = 1 copies the donor") {
        TensorF ones = TensorF::filled({4, 4}, 1.0f);
        CHECK(blend(img, donor, ones, 1.0f).data() == donor.data());
    }
    SUBCASE("scalar midpoint") {
        TensorF a = blend(TensorF::filled({1, 1, 1}, 0.2f), TensorF::filled({1, 1, 1}, 0.8f),
                          TensorF::filled({1, 1}, 1.0f), 0.5f);
        CHECK(a[0] == doctest::Approx(0.5f));
    }
    SUBCASE("outside the mask the image passes through bit-exactly") {
        TensorF a = blend(img, donor, mask, 0.7f);
        size_t hw = 16;
        for (int c = 0; c < 3; ++c)
            for (size_t i = 0; i < hw; ++i)
                if (mask[i] == 0.0f) CHECK(a[c * hw + i] == img[c * hw + i]);
    }
    SUBCASE("higher delta moves masked pixels toward the donor") {
        TensorF a1 = blend(img, donor, mask, 0.3f);
        TensorF a2 = blend(img, donor, mask, 0.9f);
        size_t hw = 16;
        for (int c = 0; c < 3; ++c)
            for (size_t i = 0; i < hw; ++i)
                if (mask[i] != 0.0f)
                    CHECK(std::abs(a2[c * hw + i] - donor[c * hw + i]) <=
                          std::abs(a1[c * hw + i] - donor[c * hw + i]) + 1e-7f);
    }
    SUBCASE("contract violations") {
        CHECK_THROWS_AS(blend(img, TensorF::zeros({3, 5, 5}), mask, 0.5f), ShapeError);
        CHECK_THROWS_AS(blend(img, donor, TensorF::zeros({5, 5}), 0.5f), ShapeError);
        CHECK_THROWS_AS(blend(img, donor, mask, 1.5f), ContractError);
    }
}

TEST_CASE("synthetic sample stream") {
    // flat normal image: degenerate full foreground, so masks are rarely empty
    std::vector<TensorF> normals = {TensorF::filled({3, 32, 32}, 0.6f)};
    std::vector<TensorF> donors = {TensorF::filled({3, 32, 32}, 0.1f)};
    SynthConfig cfg;
    cfg.seed = 77;

    SUBCASE("zero anomaly fraction emits pure normals") {
        SynthConfig c0 = cfg;
        c0.anomaly_fraction = 0.0;
        auto out = synth_dataset(normals, donors, c0, 10);
        for (const auto& s : out) {
            CHECK_FALSE(s.is_anomalous);
            CHECK(s.blended.data() == s.normal.data());
            for (float v : s.mask.data()) CHECK(v == 0.0f);
        }
    }
    SUBCASE("default fraction interleaves normal and anomalous 1:1") {
        auto out = synth_dataset(normals, donors, cfg, 40);
        int n_anom = 0;
        for (size_t i = 0; i < out.size(); i += 2) CHECK_FALSE(out[i].is_anomalous);
        for (const auto& s : out) n_anom += s.is_anomalous;
        CHECK(n_anom >= 18);  // odd slots anomalous unless every mask attempt came up empty
        CHECK(n_anom <= 20);
    }
    SUBCASE("generation is deterministic and index-stateless") {
        auto a = synth_dataset(normals, donors, cfg, 12);
        auto b = synth_dataset(normals, donors, cfg, 12);
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].blended.data() == b[i].blended.data());
            CHECK(a[i].mask.data() == b[i].mask.data());
            CHECK(a[i].delta == b[i].delta);
        }
        AnomalySample lone = synth_sample(normals, donors, cfg, 7);
        CHECK(lone.blended.data() == a[7].blended.data());
    }
    SUBCASE("blended equals normal outside the mask; delta within range") {
        auto out = synth_dataset(normals, donors, cfg, 30);
        size_t hw = 32 * 32;
        for (const auto& s : out) {
            for (int c = 0; c < 3; ++c)
                for (size_t i = 0; i < hw; ++i)
                    if (s.mask[i] == 0.0f) CHECK(s.blended[c * hw + i] == s.normal[c * hw + i]);
            if (s.is_anomalous) {
                CHECK(s.delta >= 0.5f);
                CHECK(s.delta <= 1.0f);
            }
        }
    }
    SUBCASE("masks stay inside the foreground of the normal image") {
        TensorF obj = TensorF::filled({1, 32, 32}, 0.1f);
        auto& d = obj.mutable_data();
        for (int y = 8; y < 24; ++y)
            for (int x = 8; x < 24; ++x) d[static_cast<size_t>(y) * 32 + x] = 0.9f;
        std::vector<TensorF> objs = {obj};
        std::vector<TensorF> dn = {TensorF::filled({1, 32, 32}, 0.5f)};
        auto out = synth_dataset(objs, dn, cfg, 20);
        MaskResult fg = foreground_mask(obj);
        for (const auto& s : out)
            for (size_t i = 0; i < s.mask.numel(); ++i)
                if (s.mask[i] != 0.0f) CHECK(fg.mask[i] == 1.0f);
    }
    SUBCASE("delta mean over many anomalous samples is near 0.75") {
        auto out = synth_dataset(normals, donors, cfg, 2000);
        double sum = 0;
        int n = 0;
        for (const auto& s : out)
            if (s.is_anomalous) {
                sum += s.delta;
                ++n;
            }
        CHECK(n >= 900);
        double mean = sum / n;
        CHECK(mean >= 0.73);
        CHECK(mean <= 0.77);
    }
    SUBCASE("missing inputs rejected") {
        CHECK_THROWS_AS(synth_sample({}, donors, cfg, 0), ContractError);
        CHECK_THROWS_AS(synth_sample(normals, {}, cfg, 1), ContractError);
    }
    SUBCASE("gray donor adapts to an rgb image and mismatched sizes resize") {
        std::vector<TensorF> small = {TensorF::filled({1, 8, 8}, 0.2f)};
        AnomalySample s = synth_sample(normals, small, cfg, 1);
        CHECK(s.blended.shape() == normals[0].shape());
    }
}
