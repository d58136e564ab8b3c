#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "anom/nn.hpp"
#include "anom/serialize.hpp"
#include "anom/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace anom;
using anom::testing::grad_check;

namespace {

TensorD rand_tensor(Rng& rng, const Shape& s) {
    TensorD t = sample_standard_normal<double>(rng, s);
    return t;
}

Shape rand_shape(Rng& rng, int max_rank = 4, int max_extent = 5) {
    int rank = 1 + static_cast<int>(rng.next_below(max_rank));
    Shape s(rank);
    for (auto& e : s) e = 1 + static_cast<int>(rng.next_below(max_extent));
    return s;
}

}  // namespace

TEST_CASE("forward identity and matmul identity") {
    TensorF x = TensorF::from_data({2, 2}, {1, 2, 3, 4});
    TensorF eye = TensorF::from_data({2, 2}, {1, 0, 0, 1});
    TensorF y = matmul(x, eye);
    for (int i = 0; i < 4; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d all-ones 3x3 kernel on 5x5 ones, zero pad") {
    TensorF x = TensorF::filled({1, 5, 5}, 1.0f);
    TensorF w = TensorF::filled({1, 1, 3, 3}, 1.0f);
    TensorF b = TensorF::zeros({1});
    TensorF y = conv2d(x, w, b, 1);
    REQUIRE(y.shape() == Shape{1, 5, 5});
    CHECK(y[2 * 5 + 2] == doctest::Approx(9.0f));  // center
    CHECK(y[0] == doctest::Approx(4.0f));          // corner
    CHECK(y[2] == doctest::Approx(6.0f));          // top edge
}

TEST_CASE("backward of sum of squares") {
    TensorD x = TensorD::from_data({3}, {1, 2, 3}).set_requires_grad();
    sum_all(square(x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(2));
    CHECK(x.grad()[1] == doctest::Approx(4));
    CHECK(x.grad()[2] == doctest::Approx(6));
}

TEST_CASE("stop_gradient blocks flow exactly") {
    TensorD x = TensorD::from_data({2}, {1, 2}).set_requires_grad();
    TensorD y = TensorD::from_data({2}, {3, 4}).set_requires_grad();
    sum_all(mul(stop_gradient(x), y)).backward();
    CHECK_FALSE(x.has_grad());
    CHECK(y.grad()[0] == doctest::Approx(1));
    CHECK(y.grad()[1] == doctest::Approx(2));
}

TEST_CASE("non-scalar backward is a contract error") {
    TensorD x = TensorD::from_data({2}, {1, 2}).set_requires_grad();
    CHECK_THROWS_AS(square(x).backward(), ContractError);
}

TEST_CASE("shape mismatch raises descriptive error") {
    TensorF a = TensorF::zeros({2, 3});
    TensorF b = TensorF::zeros({3, 3});
    CHECK_THROWS_AS((void)add(a, b), ShapeError);
}

TEST_CASE("finite-difference check over randomized elementwise/reduction graphs") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Shape s = rand_shape(rng);
        auto f = [](std::vector<TensorD>& in) {
            TensorD a = in[0], b = in[1];
            TensorD h = add(mul(a, b), square(sub(a, b)));
            h = add(relu(h), sigmoid(mul_scalar(a, 0.5)));
            h = add(h, exp(mul_scalar(b, 0.3)));
            h = add(h, log(add_scalar(square(a), 1.0)));
            return mean_all(h);
        };
        auto res = grad_check(f, {rand_tensor(rng, s).set_requires_grad(),
                                  rand_tensor(rng, s).set_requires_grad()});
        CHECK_MESSAGE(res.ok, "trial ", trial, " max rel err ", res.max_rel_err);
    }
}

TEST_CASE("finite-difference check for matmul, conv2d, pooling, resize, concat") {
    Rng rng(7);
    for (int trial = 0; trial < 8; ++trial) {
        int m = 2 + static_cast<int>(rng.next_below(3));
        int k = 2 + static_cast<int>(rng.next_below(3));
        int n = 2 + static_cast<int>(rng.next_below(3));
        auto fmm = [](std::vector<TensorD>& in) { return mean_all(square(matmul(in[0], in[1]))); };
        auto r1 = grad_check(fmm, {rand_tensor(rng, {m, k}).set_requires_grad(),
                                   rand_tensor(rng, {k, n}).set_requires_grad()});
        CHECK_MESSAGE(r1.ok, "matmul rel err ", r1.max_rel_err);

        int ci = 1 + static_cast<int>(rng.next_below(3));
        int co = 1 + static_cast<int>(rng.next_below(3));
        int h = 4 + static_cast<int>(rng.next_below(3));
        int stride = 1 + static_cast<int>(rng.next_below(2));
        auto fconv = [stride](std::vector<TensorD>& in) {
            return mean_all(square(conv2d(in[0], in[1], in[2], stride)));
        };
        auto r2 = grad_check(fconv, {rand_tensor(rng, {ci, h, h}).set_requires_grad(),
                                     rand_tensor(rng, {co, ci, 3, 3}).set_requires_grad(),
                                     rand_tensor(rng, {co}).set_requires_grad()});
        CHECK_MESSAGE(r2.ok, "conv rel err ", r2.max_rel_err);

        auto fpool = [](std::vector<TensorD>& in) {
            TensorD g = add(global_avg_pool(in[0]), global_max_pool(in[0]));
            return sum_all(square(g));
        };
        auto r3 = grad_check(fpool, {rand_tensor(rng, {ci, h, h}).set_requires_grad()});
        CHECK_MESSAGE(r3.ok, "pool rel err ", r3.max_rel_err);

        auto fresize = [h](std::vector<TensorD>& in) {
            TensorD up = resize_bilinear(in[0], h + 3, h + 2);
            TensorD nn2 = resize_nearest(in[0], 2);
            return add(mean_all(square(up)), mean_all(nn2));
        };
        auto r4 = grad_check(fresize, {rand_tensor(rng, {ci, h, h}).set_requires_grad()});
        CHECK_MESSAGE(r4.ok, "resize rel err ", r4.max_rel_err);

        auto fcat = [](std::vector<TensorD>& in) {
            TensorD c = concat_channels<double>({in[0], in[1]});
            TensorD s = slice_channels(c, 0, c.shape()[0]);
            return mean_all(square(gather_channels(s, {0, 0, c.shape()[0] - 1})));
        };
        auto r5 = grad_check(fcat, {rand_tensor(rng, {ci, h, h}).set_requires_grad(),
                                    rand_tensor(rng, {co, h, h}).set_requires_grad()});
        CHECK_MESSAGE(r5.ok, "concat rel err ", r5.max_rel_err);

        auto faffine = [](std::vector<TensorD>& in) {
            return mean_all(square(affine_channels(in[0], in[1], in[2])));
        };
        auto r6 = grad_check(faffine, {rand_tensor(rng, {ci, h, h}).set_requires_grad(),
                                       rand_tensor(rng, {co, ci}).set_requires_grad(),
                                       rand_tensor(rng, {co}).set_requires_grad()});
        CHECK_MESSAGE(r6.ok, "affine rel err ", r6.max_rel_err);

        int pad = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(h + 2)));
        auto fpad = [pad](std::vector<TensorD>& in) {
            TensorD p = pad_wrap(in[0], pad);
            return add(mean_all(square(crop_center(p, pad))),
                       mean_all(tanh(mul_scalar(p, 0.5))));
        };
        auto r7 = grad_check(fpad, {rand_tensor(rng, {ci, h, h}).set_requires_grad()});
        CHECK_MESSAGE(r7.ok, "pad/crop/tanh rel err ", r7.max_rel_err);
    }
}

TEST_CASE("wrap padding is periodic and centre crop inverts it") {
    Rng rng(11);
    TensorF x = sample_standard_normal<float>(rng, {2, 5, 3});
    int pad = 7;  // larger than both spatial extents: the tiling must continue
    TensorF p = pad_wrap(x, pad);
    REQUIRE(p.shape() == Shape{2, 5 + 2 * pad, 3 + 2 * pad});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 5 + 2 * pad; ++y)
            for (int xx = 0; xx < 3 + 2 * pad; ++xx) {
                int sy = ((y - pad) % 5 + 5) % 5, sx = ((xx - pad) % 3 + 3) % 3;
                CHECK(p[(static_cast<size_t>(c) * (5 + 2 * pad) + y) * (3 + 2 * pad) + xx] ==
                      x[(static_cast<size_t>(c) * 5 + sy) * 3 + sx]);
            }
    TensorF back = crop_center(p, pad);
    REQUIRE(back.shape() == x.shape());
    for (size_t i = 0; i < x.numel(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("bilinear resize to the same shape is the identity") {
    Rng rng(3);
    TensorF x = sample_standard_normal<float>(rng, {2, 7, 5});
    TensorF y = resize_bilinear(x, 7, 5);
    for (size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-6));
}

TEST_CASE("forward is pure: repeated invocation bit-identical") {
    Rng rng(11);
    TensorF x = sample_standard_normal<float>(rng, {3, 8, 8});
    TensorF w = sample_standard_normal<float>(rng, {4, 3, 3, 3});
    TensorF b = sample_standard_normal<float>(rng, {4});
    TensorF y1 = conv2d(x, w, b, 1);
    TensorF y2 = conv2d(x, w, b, 1);
    CHECK(y1.data() == y2.data());
}

TEST_CASE("normal sampling: determinism, moments, empty shape") {
    Rng a(123), b(123);
    TensorF t1 = sample_standard_normal<float>(a, {100});
    TensorF t2 = sample_standard_normal<float>(b, {100});
    CHECK(t1.data() == t2.data());

    Rng big(999);
    const size_t n = 1000000;
    double sum = 0, sq = 0;
    for (size_t i = 0; i < n; ++i) {
        double v = big.normal();
        sum += v;
        sq += v * v;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.01);

    Rng c(5);
    TensorF empty = sample_standard_normal<float>(c, {0});
    CHECK(empty.numel() == 0);
}

TEST_CASE("rng split streams are independent and reproducible") {
    Rng root(77);
    Rng s1 = root.split(1);
    Rng s2 = root.split(2);
    Rng s1b = Rng(77).split(1);
    CHECK(s1.next_u64() == s1b.next_u64());
    CHECK(s1.next_u64() != s2.next_u64());
}

TEST_CASE("adaptive optimizer: zero grad, first step magnitude, determinism, missing grad") {
    ParamSet<float> ps;
    ps.add("x", TensorF::from_data({1}, {5.0f}));

    AdamOptimizer<float> opt(1e-3f);
    SUBCASE("missing gradient is a contract error") {
        CHECK_THROWS_AS(opt.step(ps), ContractError);
    }
    SUBCASE("zero gradient leaves parameters unchanged") {
        ps.zero_grad();
        opt.step(ps);
        CHECK(ps.at("x")[0] == 5.0f);
    }
    SUBCASE("g=1 first step magnitude is about lr") {
        TensorD loss;
        ParamSet<float> q;
        q.add("x", TensorF::from_data({1}, {0.0f}));
        sum_all(q.at("x")).backward();
        AdamOptimizer<float> o2(1e-3f);
        o2.step(q);
        CHECK(q.at("x")[0] == doctest::Approx(-1e-3f).epsilon(1e-4));
    }
    SUBCASE("two identically seeded runs match") {
        auto run = []() {
            ParamSet<float> q;
            Rng rng(1);
            q.add("x", sample_standard_normal<float>(rng, {8}));
            AdamOptimizer<float> o(1e-2f);
            for (int i = 0; i < 10; ++i) {
                q.zero_grad();
                sum_all(square(q.at("x"))).backward();
                o.step(q);
            }
            return q.at("x").data();
        };
        CHECK(run() == run());
    }
}

TEST_CASE("validity check surfaces non-finite values") {
    TensorF t = TensorF::from_data({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(t.check_finite("t"), NumericError);
}

TEST_CASE("RNTF and ParamSet round-trip bit-exactly") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "anom_rntf_test";
    fs::create_directories(dir);

    Rng rng(17);
    TensorF t = sample_standard_normal<float>(rng, {2, 3, 4});
    rntf::save_tensor(dir / "t.rntf", t);
    TensorF t2 = rntf::load_tensor<float>(dir / "t.rntf");
    CHECK(t2.shape() == t.shape());
    CHECK(t2.data() == t.data());

    ParamSet<float> ps;
    ps.add("conv.w", sample_standard_normal<float>(rng, {4, 3, 3, 3}));
    ps.add("conv.b", sample_standard_normal<float>(rng, {4}));
    ps.save(dir / "ps.bin");
    auto ps2 = ParamSet<float>::load(dir / "ps.bin");
    CHECK(ps2.params.size() == 2);
    CHECK(ps2.at("conv.w").data() == ps.at("conv.w").data());
    CHECK(ps2.at("conv.b").data() == ps.at("conv.b").data());

    fs::remove_all(dir);
}
