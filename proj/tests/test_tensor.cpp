#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "ubn/gradcheck.hpp"
#include "ubn/tensor.hpp"
#include "test_util.hpp"

using namespace ubn;
using testutil::max_abs_diff;

TEST_CASE("tensor creation") {
    Tensor z = Tensor::zeros({1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(z.data()[i] == 0.0);

    Tensor ones = Tensor::constant({1, 3, 4, 4}, 1.0);
    CHECK(ones.numel() == 48);
    for (std::int64_t i = 0; i < ones.numel(); ++i) CHECK(ones.data()[i] == 1.0);

    Tensor u1 = Tensor::uniform({8}, 0.0, 1.0, 7);
    Tensor u2 = Tensor::uniform({8}, 0.0, 1.0, 7);
    CHECK(testutil::bit_identical(u1, u2));
    for (std::int64_t i = 0; i < u1.numel(); ++i) {
        CHECK(u1.data()[i] >= 0.0);
        CHECK(u1.data()[i] < 1.0);
    }

    CHECK_THROWS_AS(Tensor::zeros({0, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, -1}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({1, 2, 3, 4, 5}), ShapeError);
}

TEST_CASE("he_normal draws N(0, 2/fan_in)") {
    const int fan = 32;
    Tensor t = Tensor::he_normal({100, 100}, fan, 5);
    double mean = 0.0, sq = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        mean += t.data()[i];
        sq += t.data()[i] * t.data()[i];
    }
    mean /= static_cast<double>(t.numel());
    const double var = sq / static_cast<double>(t.numel()) - mean * mean;
    CHECK(std::fabs(mean) < 0.01);
    CHECK(var == doctest::Approx(2.0 / fan).epsilon(0.1));
    CHECK(testutil::bit_identical(t, Tensor::he_normal({100, 100}, fan, 5)));
}

TEST_CASE("binary elementwise values") {
    Tensor a = Tensor::from_data({2}, {2, 3});
    Tensor z = Tensor::from_data({2}, {0, 0});
    Tensor m = mul(a, z);
    CHECK(m.data()[0] == 0.0);
    CHECK(m.data()[1] == 0.0);

    Tensor b = Tensor::from_data({4}, {1, 2, 3, 4});
    Tensor ones = Tensor::constant({4}, 1.0);
    CHECK(max_abs_diff(add(b, ones), {2, 3, 4, 5}) == 0.0);
    CHECK(max_abs_diff(sub(b, ones), {0, 1, 2, 3}) == 0.0);
    CHECK(max_abs_diff(div(b, Tensor::constant({4}, 2.0)), {0.5, 1.0, 1.5, 2.0}) == 0.0);

    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), ShapeError);
}

TEST_CASE("broadcast of b over a") {
    // per-channel weights [N,C,1,1] and a single-channel map [N,1,H,W]
    Tensor x = Tensor::uniform({2, 3, 2, 2}, -1.0, 1.0, 11);
    Tensor wc = Tensor::from_data({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
    Tensor y = mul(x, wc);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i) {
                const std::int64_t idx = ((n * 3 + c) * 4) + i;
                CHECK(y.data()[idx] ==
                      doctest::Approx(x.data()[idx] * wc.data()[n * 3 + c]).epsilon(1e-6));
            }
    Tensor mask = Tensor::uniform({2, 1, 2, 2}, 0.0, 1.0, 12);
    Tensor ym = mul(x, mask);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 4; ++i) {
                const std::int64_t idx = ((n * 3 + c) * 4) + i;
                CHECK(ym.data()[idx] ==
                      doctest::Approx(x.data()[idx] * mask.data()[n * 4 + i]).epsilon(1e-6));
            }
    // a may not broadcast over b
    CHECK_THROWS_AS(mul(wc, x), ShapeError);
}

TEST_CASE("mul gradient matches finite differences") {
    PrecisionScope p64(Precision::f64);
    Rng rng(3);
    Tensor a = Tensor::uniform({2, 3}, -1.0, 1.0, 31);
    Tensor b = Tensor::uniform({2, 3}, -1.0, 1.0, 32);
    const double err = check_gradient([&] { return sum_all(mul(a, b)); }, a, 1e-5, 64, rng);
    CHECK(err <= 1e-5);
}

TEST_CASE("activations") {
    Tensor x = Tensor::from_data({3}, {-3.0, 0.0, 3.0});
    Tensor r = relu(x);
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 0.0);
    CHECK(r.data()[2] == 3.0);
    Tensor s = sigmoid(Tensor::zeros({1}));
    CHECK(s.data()[0] == doctest::Approx(0.5));

    PrecisionScope p64(Precision::f64);
    Rng rng(4);
    Tensor t2 = Tensor::from_data({1}, {2.0});
    const double err =
        check_gradient([&] { return sum_all(sigmoid(t2)); }, t2, 1e-5, 4, rng);
    CHECK(err <= 1e-5);
}

namespace {

// Direct summation reference for conv2d (floor output extents).
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                                int pad, int groups) {
    const int n = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    const int cout = w.extent(0), k = w.extent(2);
    const int cin_g = cin / groups, cout_g = cout / groups;
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(n) * cout * ho * wo, 0.0);
    for (int ni = 0; ni < n; ++ni)
        for (int co = 0; co < cout; ++co) {
            const int g = co / cout_g;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = b.data()[co];
                    for (int ci = 0; ci < cin_g; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += x.data()[((std::int64_t(ni) * cin + g * cin_g + ci) * h +
                                                 iy) *
                                                    wd +
                                                ix] *
                                       w.data()[((std::int64_t(co) * cin_g + ci) * k + ky) * k +
                                                kx];
                            }
                    y[((std::int64_t(ni) * cout + co) * ho + oy) * wo + ox] = acc;
                }
        }
    return y;
}

}  // namespace

TEST_CASE("conv2d identity and constant kernels") {
    Tensor x = Tensor::uniform({1, 2, 4, 4}, -1.0, 1.0, 21);
    Tensor w_id = Tensor::zeros({2, 2, 1, 1});
    w_id.data()[0] = 1.0;  // out0 <- in0
    w_id.data()[3] = 1.0;  // out1 <- in1
    Tensor y = conv2d(x, w_id, Tensor::zeros({2}), 1, 0);
    CHECK(max_abs_diff(y, x) == 0.0);

    Tensor w0 = Tensor::zeros({3, 2, 3, 3});
    Tensor b = Tensor::constant({3}, 0.7);
    Tensor y2 = conv2d(x, w0, b, 1, 1);
    CHECK(y2.shape() == Shape{1, 3, 4, 4});
    for (std::int64_t i = 0; i < y2.numel(); ++i) CHECK(y2.data()[i] == doctest::Approx(0.7));
}

TEST_CASE("conv2d matches the direct summation oracle") {
    PrecisionScope p64(Precision::f64);
    Tensor x = Tensor::uniform({1, 2, 5, 5}, -1.0, 1.0, 22);
    Tensor w = Tensor::uniform({3, 2, 3, 3}, -1.0, 1.0, 23);
    Tensor b = Tensor::uniform({3}, -0.5, 0.5, 24);
    Tensor y = conv2d(x, w, b, 1, 1);
    CHECK(max_abs_diff(y, conv_oracle(x, w, b, 1, 1, 1)) <= 1e-6);

    // strided and grouped variants
    Tensor xs = Tensor::uniform({2, 4, 6, 6}, -1.0, 1.0, 25);
    Tensor ws = Tensor::uniform({6, 2, 3, 3}, -1.0, 1.0, 26);
    Tensor bs = Tensor::uniform({6}, -0.5, 0.5, 27);
    Tensor ys = conv2d(xs, ws, bs, 2, 1, 2);
    CHECK(ys.shape() == Shape{2, 6, 3, 3});
    CHECK(max_abs_diff(ys, conv_oracle(xs, ws, bs, 2, 1, 2)) <= 1e-6);

    // depthwise
    Tensor wd = Tensor::uniform({4, 1, 3, 3}, -1.0, 1.0, 28);
    Tensor bd = Tensor::zeros({4});
    Tensor yd = conv2d(xs, wd, bd, 1, 1, 4);
    CHECK(max_abs_diff(yd, conv_oracle(xs, wd, bd, 1, 1, 4)) <= 1e-6);
}

TEST_CASE("conv2d shape contracts") {
    Tensor x = Tensor::zeros({1, 2, 64, 64});
    Tensor w = Tensor::zeros({4, 2, 3, 3});
    Tensor b = Tensor::zeros({4});
    CHECK(conv2d(x, w, b, 2, 1).shape() == Shape{1, 4, 32, 32});
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({4, 2, 2, 2}), b, 1, 1), ShapeError);  // even k
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({4, 3, 3, 3}), b, 1, 1), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 1, 1}), w, b, 1, 0), ShapeError);  // too small
    CHECK_THROWS_AS(conv2d(x, w, Tensor::zeros({5}), 1, 1), ShapeError);
}

namespace {

// Per-pixel reference for half-pixel-center bilinear resampling.
double bilinear_sample(const std::vector<double>& img, int h, int w, double sy, double sx) {
    const int y0 = static_cast<int>(std::floor(sy));
    const int x0 = static_cast<int>(std::floor(sx));
    const double fy = sy - y0, fx = sx - x0;
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return img[static_cast<std::size_t>(y) * w + x];
    };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
           fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

}  // namespace

TEST_CASE("bilinear resize") {
    Tensor blk = Tensor::from_data({1, 1, 2, 2}, {1, 3, 5, 7});
    CHECK(bilinear_down2(blk).data()[0] == doctest::Approx(4.0));

    Tensor c = Tensor::constant({1, 2, 8, 8}, 0.42);
    CHECK(max_abs_diff(bilinear_down2(c), Tensor::constant({1, 2, 4, 4}, 0.42)) <= 1e-7);
    CHECK(max_abs_diff(bilinear_down4(c), Tensor::constant({1, 2, 2, 2}, 0.42)) <= 1e-7);
    CHECK(max_abs_diff(bilinear_up_to(c, 13, 5), Tensor::constant({1, 2, 13, 5}, 0.42)) <= 1e-7);

    CHECK_THROWS_AS(bilinear_down2(Tensor::zeros({1, 1, 3, 4})), ShapeError);

    PrecisionScope p64(Precision::f64);
    Tensor x = Tensor::uniform({1, 1, 8, 8}, 0.0, 1.0, 33);
    Tensor round_trip = bilinear_up_to(bilinear_down2(x), 8, 8);
    // oracle: block means, then per-pixel interpolation back to 8x8
    std::vector<double> down(16);
    for (int y = 0; y < 4; ++y)
        for (int xx = 0; xx < 4; ++xx)
            down[static_cast<std::size_t>(y) * 4 + xx] =
                (x.data()[(2 * y) * 8 + 2 * xx] + x.data()[(2 * y) * 8 + 2 * xx + 1] +
                 x.data()[(2 * y + 1) * 8 + 2 * xx] + x.data()[(2 * y + 1) * 8 + 2 * xx + 1]) /
                4.0;
    double worst = 0.0;
    for (int oy = 0; oy < 8; ++oy)
        for (int ox = 0; ox < 8; ++ox) {
            const double sy = (oy + 0.5) * 4.0 / 8.0 - 0.5;
            const double sx = (ox + 0.5) * 4.0 / 8.0 - 0.5;
            const double want = bilinear_sample(down, 4, 4, sy, sx);
            worst = std::max(worst, std::fabs(round_trip.data()[oy * 8 + ox] - want));
        }
    CHECK(worst <= 1e-6);
}

TEST_CASE("global average pooling") {
    CHECK(global_avg_pool(Tensor::constant({1, 1, 5, 7}, 0.3)).data()[0] ==
          doctest::Approx(0.3));
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(x).data()[0] == doctest::Approx(2.5));

    PrecisionScope p64(Precision::f64);
    Rng rng(5);
    Tensor t = Tensor::uniform({1, 2, 3, 3}, -1.0, 1.0, 51);
    Tensor cw = Tensor::uniform({1, 2, 1, 1}, 0.5, 1.5, 52);
    const double err = check_gradient(
        [&] { return sum_all(mul(global_avg_pool(t), cw)); }, t, 1e-5, 32, rng);
    CHECK(err <= 1e-5);
}

TEST_CASE("linear layer") {
    Tensor x = Tensor::uniform({2, 3}, -1.0, 1.0, 61);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
    CHECK(max_abs_diff(linear(x, eye, Tensor::zeros({3})), x) == 0.0);

    Tensor bias = Tensor::from_data({4}, {1, 2, 3, 4});
    Tensor yb = linear(x, Tensor::zeros({4, 3}), bias);
    for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 4; ++o) CHECK(yb.data()[n * 4 + o] == doctest::Approx(o + 1.0));

    PrecisionScope p64(Precision::f64);
    Tensor w = Tensor::uniform({4, 3}, -1.0, 1.0, 62);
    Tensor y = linear(x, w, bias);
    for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 4; ++o) {
            double acc = bias.data()[o];
            for (int k = 0; k < 3; ++k) acc += x.data()[n * 3 + k] * w.data()[o * 3 + k];
            CHECK(std::fabs(y.data()[n * 4 + o] - acc) <= 1e-6);
        }
    CHECK_THROWS_AS(linear(x, Tensor::zeros({4, 5}), bias), ShapeError);
}

TEST_CASE("concat and slice") {
    Tensor a = Tensor::uniform({2, 2, 3, 3}, -1.0, 1.0, 71);
    Tensor b = Tensor::uniform({2, 3, 3, 3}, -1.0, 1.0, 72);
    Tensor cat = concat_channels(a, b);
    CHECK(cat.shape() == Shape{2, 5, 3, 3});
    CHECK(max_abs_diff(slice_channels(cat, 0, 2), a) == 0.0);
    CHECK(max_abs_diff(slice_channels(cat, 2, 5), b) == 0.0);

    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Graph g;
    {
        Recording rec(g);
        Tensor loss = sum_all(concat_channels(a, b));
        g.backward(loss);
    }
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.grad_data()[i] == 1.0);
    for (std::int64_t i = 0; i < b.numel(); ++i) CHECK(b.grad_data()[i] == 1.0);

    CHECK_THROWS_AS(concat_channels(a, Tensor::zeros({2, 3, 4, 3})), ShapeError);
    CHECK_THROWS_AS(slice_channels(cat, 3, 2), ShapeError);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Graph g;
    {
        Recording rec(g);
        Tensor loss = sum_all(mul(x, x));
        g.backward(loss);
    }
    CHECK(x.grad_data()[0] == doctest::Approx(6.0));

    // loss independent of y -> zero gradient
    Tensor y = Tensor::from_data({1}, {5.0}, true);
    Graph g2;
    {
        Recording rec(g2);
        Tensor loss = sum_all(mul(x, x));
        g2.backward(loss);
    }
    CHECK_FALSE(y.has_grad());

    // non-scalar loss rejected
    Tensor v = Tensor::zeros({3}, true);
    Graph g3;
    {
        Recording rec(g3);
        Tensor out = add(v, v);
        CHECK_THROWS_AS(g3.backward(out), ContractError);
    }
}

TEST_CASE("backward accumulates across repeated calls") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    Graph g;
    Tensor loss;
    {
        Recording rec(g);
        loss = sum_all(mul(x, x));
    }
    g.backward(loss);
    g.backward(loss);
    CHECK(x.grad_data()[0] == doctest::Approx(12.0));
}

TEST_CASE("backward is linear in the loss") {
    PrecisionScope p64(Precision::f64);
    const double alpha = 1.7, beta = -0.6;
    Tensor x = Tensor::uniform({2, 3}, -1.0, 1.0, 81, true);
    auto l1 = [&] { return sum_all(mul(x, x)); };
    auto l2 = [&] { return sum_all(sigmoid(x)); };

    Graph ga;
    {
        Recording rec(ga);
        ga.backward(l1());
    }
    std::vector<double> g1(x.grad_data(), x.grad_data() + x.numel());
    x.zero_grad();
    Graph gb;
    {
        Recording rec(gb);
        gb.backward(l2());
    }
    std::vector<double> g2(x.grad_data(), x.grad_data() + x.numel());
    x.zero_grad();
    Graph gc;
    {
        Recording rec(gc);
        gc.backward(add(affine(l1(), alpha, 0.0), affine(l2(), beta, 0.0)));
    }
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(std::fabs(x.grad_data()[i] -
                        (alpha * g1[static_cast<std::size_t>(i)] +
                         beta * g2[static_cast<std::size_t>(i)])) <= 1e-6);
}

TEST_CASE("forward and backward are deterministic") {
    auto run = [](std::vector<double>& grads) {
        Tensor x = Tensor::uniform({1, 2, 6, 6}, -1.0, 1.0, 91, true);
        Tensor w = Tensor::he_normal({3, 2, 3, 3}, 18, 92, true);
        Tensor b = Tensor::zeros({3}, true);
        Graph g;
        Tensor loss;
        {
            Recording rec(g);
            loss = mean_all(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1)));
            g.backward(loss);
        }
        grads.assign(w.grad_data(), w.grad_data() + w.numel());
        return loss.item();
    };
    std::vector<double> ga, gb;
    const double la = run(ga);
    const double lb = run(gb);
    CHECK(la == lb);
    CHECK(ga == gb);
}

TEST_CASE("gradient suite passes in f64") {
    PrecisionScope p64(Precision::f64);
    GradCheckOptions opt;
    opt.seed = 1;
    for (const auto& r : run_gradient_suite(opt)) {
        INFO(r.op, " rel err ", r.max_rel_err);
        CHECK(r.pass);
    }
}
