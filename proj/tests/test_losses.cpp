#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ubn/gradcheck.hpp"
#include "ubn/losses.hpp"
#include "test_util.hpp"

using namespace ubn;

TEST_CASE("reconstruction loss") {
    Tensor a = Tensor::uniform({1, 3, 4, 4}, 0.0, 1.0, 61);
    CHECK(rec_loss(a, a).item() == 0.0);
    CHECK(rec_loss(Tensor::constant({1, 3, 4, 4}, 0.3), Tensor::constant({1, 3, 4, 4}, 0.5))
              .item() == doctest::Approx(0.2));
    CHECK_THROWS_AS(rec_loss(a, Tensor::zeros({1, 3, 4, 5})), ShapeError);

    PrecisionScope p64(Precision::f64);
    Rng rng(62);
    Tensor out = Tensor::uniform({1, 3, 4, 4}, 0.0, 1.0, 63);
    Tensor gt = Tensor::uniform({1, 3, 4, 4}, 0.0, 1.0, 64);
    CHECK(check_gradient([&] { return rec_loss(out, gt); }, out, 1e-5, 24, rng) <= 1e-4);
}

TEST_CASE("ssim loss basics") {
    Tensor a = Tensor::uniform({1, 3, 12, 12}, 0.0, 1.0, 65);
    CHECK(std::fabs(ssim_loss(a, a).item()) <= 1e-6);
    Tensor b = Tensor::uniform({1, 3, 12, 12}, 0.0, 1.0, 66);
    const double l = ssim_loss(a, b).item();
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
    CHECK_THROWS_AS(ssim_loss(Tensor::zeros({1, 3, 8, 8}), Tensor::zeros({1, 3, 8, 8})),
                    ShapeError);
}

TEST_CASE("ssim loss closed form for constant images") {
    PrecisionScope p64(Precision::f64);
    Tensor x = Tensor::constant({1, 1, 12, 12}, 0.25);
    Tensor y = Tensor::constant({1, 1, 12, 12}, 0.75);
    const double c1 = 1e-4;
    // zero variance: only the luminance factor survives
    const double want = 1.0 - (2.0 * 0.25 * 0.75 + c1) / (0.25 * 0.25 + 0.75 * 0.75 + c1);
    CHECK(ssim_loss(x, y).item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("gradient loss") {
    Tensor a = Tensor::uniform({1, 3, 5, 5}, 0.0, 1.0, 67);
    CHECK(grad_loss(a, a).item() == 0.0);

    PrecisionScope p64(Precision::f64);
    Tensor b = Tensor::uniform({1, 3, 5, 5}, 0.0, 1.0, 68);
    Tensor shifted = affine(b, 1.0, 0.17);
    CHECK(std::fabs(grad_loss(shifted, b).item()) <= 1e-12);

    // hand 2x2 case: out=[0,1;1,0], gt=[0,0;1,1]
    Tensor out = Tensor::from_data({1, 1, 2, 2}, {0, 1, 1, 0});
    Tensor gt = Tensor::from_data({1, 1, 2, 2}, {0, 0, 1, 1});
    // dx(out)=[1;-1], dx(gt)=[0;0] -> mean 1. dy(out)=[1,-1], dy(gt)=[1,1] -> mean 1.
    CHECK(grad_loss(out, gt).item() == doctest::Approx(1.0));

    Rng rng(69);
    CHECK(check_gradient([&] { return grad_loss(b, a); }, b, 1e-5, 24, rng) <= 1e-4);
    CHECK_THROWS_AS(grad_loss(Tensor::zeros({1, 1, 1, 4}), Tensor::zeros({1, 1, 1, 4})),
                    ShapeError);
}

TEST_CASE("perceptual loss") {
    PerceptualExtractor phi;
    Tensor a = Tensor::uniform({1, 3, 16, 16}, 0.0, 1.0, 70);
    CHECK(perc_loss(a, a, phi).item() == 0.0);

    // two fresh extractors from the same fixed seed agree exactly
    PerceptualExtractor phi2;
    Tensor b = Tensor::uniform({1, 3, 16, 16}, 0.0, 1.0, 71);
    CHECK(perc_loss(a, b, phi).item() == perc_loss(a, b, phi2).item());
    CHECK_FALSE(phi.w1.requires_grad());

    PrecisionScope p64(Precision::f64);
    Rng rng(72);
    Tensor out = Tensor::uniform({1, 3, 8, 8}, 0.0, 1.0, 73);
    Tensor gt = Tensor::uniform({1, 3, 8, 8}, 0.0, 1.0, 74);
    CHECK(check_gradient([&] { return perc_loss(out, gt, phi); }, out, 1e-5, 24, rng) <= 1e-4);
    CHECK_THROWS_AS(perc_loss(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 4, 4}), phi),
                    ShapeError);
}

namespace {

// brute-force per-pixel reference
std::vector<double> pseudo_mask_oracle(const Tensor& degraded, const Tensor& clean,
                                       const PseudoMaskConfig& cfg) {
    const int h = degraded.extent(2), w = degraded.extent(3);
    const std::int64_t plane = std::int64_t(h) * w;
    std::vector<double> diff(static_cast<std::size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
        const double gd = 0.299 * degraded.data()[i] + 0.587 * degraded.data()[plane + i] +
                          0.114 * degraded.data()[2 * plane + i];
        const double gc = 0.299 * clean.data()[i] + 0.587 * clean.data()[plane + i] +
                          0.114 * clean.data()[2 * plane + i];
        const double d = (gc - gd) / (gc + cfg.eps);
        diff[static_cast<std::size_t>(i)] = d > 0 ? d : 0;
    }
    std::vector<double> mask(static_cast<std::size_t>(plane), 0.0);
    const int r = cfg.window / 2;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int ky = -r; ky <= r; ++ky)
                for (int kx = -r; kx <= r; ++kx) {
                    const int iy = y + ky, ix = x + kx;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                    acc += diff[static_cast<std::size_t>(iy) * w + ix];
                }
            mask[static_cast<std::size_t>(y) * w + x] =
                acc / (cfg.window * cfg.window) > cfg.tau ? 1.0 : 0.0;
        }
    return mask;
}

}  // namespace

TEST_CASE("pseudo mask degenerate cases") {
    Tensor img = Tensor::uniform({1, 3, 8, 8}, 0.1, 0.9, 75);
    Tensor same = build_pseudo_mask(img, img);
    for (std::int64_t i = 0; i < same.numel(); ++i) CHECK(same.data()[i] == 0.0);

    // degraded brighter than clean everywhere: the positive part clamps to 0
    Tensor brighter = affine(img, 1.0, 0.05);
    for (std::int64_t i = 0; i < brighter.numel(); ++i)
        brighter.data()[i] = std::min(brighter.data()[i], 1.0);
    Tensor m = build_pseudo_mask(brighter, img);
    for (std::int64_t i = 0; i < m.numel(); ++i) CHECK(m.data()[i] == 0.0);

    CHECK_THROWS_AS(build_pseudo_mask(Tensor::constant({1, 3, 8, 8}, 1.5), img), ContractError);
    CHECK_THROWS_AS(build_pseudo_mask(img, Tensor::zeros({1, 3, 8, 9})), ShapeError);
    PseudoMaskConfig bad;
    bad.window = 4;
    CHECK_THROWS_AS(build_pseudo_mask(img, img, bad), ContractError);
    bad.window = 7;
    bad.tau = 1.5;
    CHECK_THROWS_AS(build_pseudo_mask(img, img, bad), ContractError);
}

TEST_CASE("pseudo mask on a dark patch") {
    const int n = 32;
    Tensor clean = Tensor::constant({1, 3, n, n}, 0.8);
    Tensor degraded = Tensor::constant({1, 3, n, n}, 0.8);
    const std::int64_t plane = std::int64_t(n) * n;
    for (int c = 0; c < 3; ++c)
        for (int y = 10; y < 19; ++y)
            for (int x = 10; x < 19; ++x)
                degraded.data()[c * plane + std::int64_t(y) * n + x] = 0.4;
    Tensor mask = build_pseudo_mask(degraded, clean);
    // interior of the patch (full window inside): d = 0.4/0.801 > tau
    for (int y = 13; y < 16; ++y)
        for (int x = 13; x < 16; ++x) CHECK(mask.data()[std::int64_t(y) * n + x] == 1.0);
    // pixels whose window never touches the patch
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < n; ++x) CHECK(mask.data()[std::int64_t(y) * n + x] == 0.0);
    // full map against the oracle
    const std::vector<double> want = pseudo_mask_oracle(degraded, clean, {});
    for (std::int64_t i = 0; i < mask.numel(); ++i)
        CHECK(mask.data()[i] == want[static_cast<std::size_t>(i)]);
}

TEST_CASE("pseudo mask is bit-exact against the oracle on random pairs") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Tensor clean = Tensor::uniform({1, 3, 16, 16}, 0.2, 1.0, 900 + seed);
        Tensor att = Tensor::uniform({1, 3, 16, 16}, 0.4, 1.0, 950 + seed);
        Tensor degraded = mul(clean, att);
        Tensor mask = build_pseudo_mask(degraded, clean);
        const std::vector<double> want = pseudo_mask_oracle(degraded, clean, {});
        for (std::int64_t i = 0; i < mask.numel(); ++i)
            CHECK(mask.data()[i] == want[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("mask loss") {
    Tensor m = Tensor::uniform({1, 1, 6, 6}, 0.0, 1.0, 76);
    CHECK(mask_loss(m, m).item() == 0.0);
    CHECK(mask_loss(Tensor::constant({1, 1, 6, 6}, 0.5), Tensor::zeros({1, 1, 6, 6})).item() ==
          doctest::Approx(0.5));

    PrecisionScope p64(Precision::f64);
    Rng rng(77);
    Tensor mgt = Tensor::zeros({1, 1, 6, 6});
    for (std::int64_t i = 0; i < mgt.numel(); ++i) mgt.data()[i] = rng.below(2) ? 1.0 : 0.0;
    Tensor pred = Tensor::uniform({1, 1, 6, 6}, 0.05, 0.95, 78);
    CHECK(check_gradient([&] { return mask_loss(pred, mgt); }, pred, 1e-5, 24, rng) <= 1e-4);
}

TEST_CASE("total loss composition") {
    PerceptualExtractor phi;
    Tensor gt = Tensor::uniform({1, 3, 12, 12}, 0.1, 0.9, 79);
    Tensor mgt = Tensor::zeros({1, 1, 12, 12});
    LossWeights w;

    LossTerms perfect = total_loss(gt, gt, mgt, mgt, w, phi);
    CHECK(perfect.total.item() <= 1e-6);

    Tensor out = Tensor::uniform({1, 3, 12, 12}, 0.1, 0.9, 80);
    Tensor pm = Tensor::uniform({1, 1, 12, 12}, 0.1, 0.9, 81);
    LossWeights zero;
    zero.alpha1 = zero.alpha2 = zero.alpha3 = zero.lambda_mask = 0.0;
    CHECK(total_loss(out, gt, pm, mgt, zero, phi).total.item() ==
          doctest::Approx(rec_loss(out, gt).item()));

    LossWeights unit;
    unit.alpha1 = unit.alpha2 = unit.alpha3 = unit.lambda_mask = 1.0;
    LossTerms t = total_loss(out, gt, pm, mgt, unit, phi);
    const double parts = rec_loss(out, gt).item() + ssim_loss(out, gt).item() +
                         grad_loss(out, gt).item() + perc_loss(out, gt, phi).item() +
                         mask_loss(pm, mgt).item();
    CHECK(std::fabs(t.total.item() - parts) <= 1e-6);

    // linear in the weights
    LossWeights wa;
    wa.alpha1 = 0.3;
    wa.alpha2 = 0.0;
    wa.alpha3 = 0.0;
    wa.lambda_mask = 0.0;
    LossWeights wb;
    wb.alpha1 = 0.6;
    wb.alpha2 = 0.0;
    wb.alpha3 = 0.0;
    wb.lambda_mask = 0.0;
    const double la = total_loss(out, gt, pm, mgt, wa, phi).total.item();
    const double lb = total_loss(out, gt, pm, mgt, wb, phi).total.item();
    const double rec = rec_loss(out, gt).item();
    CHECK(std::fabs((lb - rec) - 2.0 * (la - rec)) <= 1e-6);

    LossWeights neg;
    neg.alpha1 = -0.1;
    CHECK_THROWS_AS(total_loss(out, gt, pm, mgt, neg, phi), ContractError);

    // without a mask pair the term vanishes
    LossTerms nm = total_loss(out, gt, std::nullopt, std::nullopt, unit, phi);
    CHECK(nm.mask == 0.0);
    CHECK(std::fabs(nm.total.item() - (parts - mask_loss(pm, mgt).item())) <= 1e-6);
}
