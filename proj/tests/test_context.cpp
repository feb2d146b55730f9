#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ubn/context.hpp"
#include "ubn/gradcheck.hpp"
#include "test_util.hpp"

using namespace ubn;

TEST_CASE("zero parameters give a zero field") {
    ContextParams p = ContextParams::zeros(4);
    Tensor out = context_forward(Tensor::uniform({1, 3, 16, 16}, 0.0, 1.0, 31), p);
    CHECK(out.shape() == Shape{1, 4, 16, 16});
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("constant input gives a constant interior") {
    Rng rng(32);
    ContextParams p = ContextParams::init(4, rng);  // biases are zero at init
    Tensor out = context_forward(Tensor::constant({1, 3, 32, 32}, 0.6), p);
    // interior = full receptive field (radius 9) inside the image
    const std::int64_t plane = 32 * 32;
    for (int c = 0; c < 4; ++c) {
        const double ref = out.data()[c * plane + 12 * 32 + 12];
        for (int y = 10; y <= 21; ++y)
            for (int x = 10; x <= 21; ++x)
                CHECK(std::fabs(out.data()[c * plane + y * 32 + x] - ref) <= 1e-6);
    }
}

TEST_CASE("impulse response has Chebyshev radius exactly 9") {
    const int cg = 2, n = 24, mid = 12;
    ContextParams p = ContextParams::zeros(cg);
    // route input channel 0 through full positive kernels on context channel 0
    for (int i = 0; i < 9; ++i) p.stem_w.data()[i] = 1.0;          // [0,0,:,:]
    for (int i = 0; i < 49; ++i) p.dw7_w.data()[i] = 1.0;          // channel 0
    for (int i = 0; i < 121; ++i) p.dw11_w.data()[i] = 1.0;        // channel 0
    p.proj_w.data()[0] = 1.0;                                      // [0,0]
    Tensor img = Tensor::zeros({1, 3, n, n});
    img.data()[std::int64_t(mid) * n + mid] = 1.0;  // channel 0 impulse
    Tensor out = context_forward(img, p);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const int dist = std::max(std::abs(y - mid), std::abs(x - mid));
            const double v = out.data()[std::int64_t(y) * n + x];  // channel 0
            if (dist <= 9)
                CHECK(v > 0.0);
            else
                CHECK(v == 0.0);
        }
}

TEST_CASE("gradient check on a 1x3x12x12 input") {
    PrecisionScope p64(Precision::f64);
    Rng rng(33);
    ContextParams p = ContextParams::init(3, rng);
    // the projection starts at zero; give it mass so its input gradients live
    p.proj_w = Tensor::uniform(p.proj_w.shape(), -0.5, 0.5, rng, true);
    Tensor img = Tensor::uniform({1, 3, 12, 12}, 0.0, 1.0, 34);
    Tensor cw = Tensor::uniform({1, 3, 12, 12}, 0.5, 1.5, 35);
    auto fwd = [&] { return sum_all(mul(context_forward(img, p), cw)); };
    CHECK(check_gradient(fwd, img, 1e-5, 20, rng) <= 1e-4);
    CHECK(check_gradient(fwd, p.dw11_w, 1e-5, 20, rng) <= 1e-4);
    CHECK(check_gradient(fwd, p.stem_w, 1e-5, 20, rng) <= 1e-4);
}

TEST_CASE("minimum extent is enforced") {
    ContextParams p = ContextParams::zeros(2);
    CHECK_THROWS_AS(context_forward(Tensor::zeros({1, 3, 10, 16}), p), ShapeError);
    CHECK_THROWS_AS(context_forward(Tensor::zeros({1, 2, 16, 16}), p), ShapeError);
}
