#include "ubn/losses.hpp"

#include <cmath>

namespace ubn {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor rec_loss(const Tensor& out, const Tensor& gt) {
    check_same_shape(out, gt, "rec_loss");
    return mean_all(abs_val(sub(out, gt)));
}

namespace {

// 11x11 Gaussian window, sigma 1.5, normalized to sum 1; replicated per
// channel as a depthwise kernel.
Tensor gaussian_window(int channels) {
    constexpr int k = 11;
    constexpr double sigma = 1.5;
    double w[k * k];
    double sum = 0.0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            const double dy = y - (k - 1) / 2.0, dx = x - (k - 1) / 2.0;
            w[y * k + x] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            sum += w[y * k + x];
        }
    std::vector<double> data(static_cast<std::size_t>(channels) * k * k);
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < k * k; ++i)
            data[static_cast<std::size_t>(c) * k * k + static_cast<std::size_t>(i)] = w[i] / sum;
    return Tensor::from_data({channels, 1, k, k}, std::move(data));
}

}  // namespace

Tensor ssim_loss(const Tensor& out, const Tensor& gt) {
    check_same_shape(out, gt, "ssim_loss");
    if (out.rank() != 4) throw ShapeError("ssim_loss: operands must be rank 4");
    if (out.extent(2) < 11 || out.extent(3) < 11)
        throw ShapeError("ssim_loss: spatial extents must be >= 11, got " +
                         shape_str(out.shape()));
    const int c = out.extent(1);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    Tensor win = gaussian_window(c);
    Tensor zero_b = Tensor::zeros({c});
    auto blur = [&](const Tensor& t) { return conv2d(t, win, zero_b, 1, 0, c); };
    Tensor mu_x = blur(out), mu_y = blur(gt);
    Tensor xx = blur(mul(out, out)), yy = blur(mul(gt, gt)), xy = blur(mul(out, gt));
    Tensor var_x = sub(xx, mul(mu_x, mu_x));
    Tensor var_y = sub(yy, mul(mu_y, mu_y));
    Tensor cov = sub(xy, mul(mu_x, mu_y));
    Tensor num = mul(affine(mul(mu_x, mu_y), 2.0, c1), affine(cov, 2.0, c2));
    Tensor den = mul(affine(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), 1.0, c1),
                     affine(add(var_x, var_y), 1.0, c2));
    return affine(mean_all(div(num, den)), -1.0, 1.0);
}

Tensor grad_loss(const Tensor& out, const Tensor& gt) {
    check_same_shape(out, gt, "grad_loss");
    if (out.rank() != 4) throw ShapeError("grad_loss: operands must be rank 4");
    const int h = out.extent(2), w = out.extent(3);
    if (h < 2 || w < 2)
        throw ShapeError("grad_loss: spatial extents must be >= 2, got " +
                         shape_str(out.shape()));
    auto dx = [&](const Tensor& t) {
        return sub(crop_spatial(t, 0, h, 1, w), crop_spatial(t, 0, h, 0, w - 1));
    };
    auto dy = [&](const Tensor& t) {
        return sub(crop_spatial(t, 1, h, 0, w), crop_spatial(t, 0, h - 1, 0, w));
    };
    Tensor term_x = mean_all(abs_val(sub(dx(out), dx(gt))));
    Tensor term_y = mean_all(abs_val(sub(dy(out), dy(gt))));
    return affine(add(term_x, term_y), 0.5, 0.0);
}

PerceptualExtractor::PerceptualExtractor() {
    Rng rng(42);
    w1 = Tensor::he_normal({8, 3, 3, 3}, 3 * 9, rng);
    b1 = Tensor::zeros({8});
    w2 = Tensor::he_normal({16, 8, 3, 3}, 8 * 9, rng);
    b2 = Tensor::zeros({16});
    w3 = Tensor::he_normal({32, 16, 3, 3}, 16 * 9, rng);
    b3 = Tensor::zeros({32});
}

Tensor perc_loss(const Tensor& out, const Tensor& gt, const PerceptualExtractor& phi) {
    check_same_shape(out, gt, "perc_loss");
    if (out.rank() != 4) throw ShapeError("perc_loss: operands must be rank 4");
    if (out.extent(2) < 8 || out.extent(3) < 8)
        throw ShapeError("perc_loss: spatial extents must be >= 8, got " +
                         shape_str(out.shape()));
    auto f1 = [&](const Tensor& t) { return relu(conv2d(t, phi.w1, phi.b1, 2, 1)); };
    auto f2 = [&](const Tensor& t) { return relu(conv2d(t, phi.w2, phi.b2, 2, 1)); };
    auto f3 = [&](const Tensor& t) { return relu(conv2d(t, phi.w3, phi.b3, 2, 1)); };
    Tensor o1 = f1(out), g1 = f1(gt);
    Tensor o2 = f2(o1), g2 = f2(g1);
    Tensor o3 = f3(o2), g3 = f3(g2);
    Tensor l = add(add(mean_all(abs_val(sub(o1, g1))), mean_all(abs_val(sub(o2, g2)))),
                   mean_all(abs_val(sub(o3, g3))));
    return affine(l, 1.0 / 3.0, 0.0);
}

Tensor build_pseudo_mask(const Tensor& degraded, const Tensor& clean,
                         const PseudoMaskConfig& cfg) {
    check_same_shape(degraded, clean, "build_pseudo_mask");
    if (degraded.rank() != 4 || degraded.extent(0) != 1 || degraded.extent(1) != 3)
        throw ShapeError("build_pseudo_mask: inputs must be [1,3,H,W]");
    if (cfg.window < 1 || cfg.window % 2 == 0)
        throw ContractError("build_pseudo_mask: window must be odd and >= 1");
    if (cfg.tau <= 0.0 || cfg.tau >= 1.0)
        throw ContractError("build_pseudo_mask: tau must lie in (0,1)");
    if (cfg.eps <= 0.0) throw ContractError("build_pseudo_mask: eps must be positive");
    const int h = degraded.extent(2), w = degraded.extent(3);
    const std::int64_t plane = std::int64_t(h) * w;
    const double* dd = degraded.data();
    const double* cd = clean.data();
    for (std::int64_t i = 0; i < 3 * plane; ++i)
        if (dd[i] < 0.0 || dd[i] > 1.0 || cd[i] < 0.0 || cd[i] > 1.0)
            throw ContractError("build_pseudo_mask: image values must lie in [0,1]");

    // Positive relative grayscale difference, computed in double throughout.
    std::vector<double> diff(static_cast<std::size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
        const double gd = 0.299 * dd[i] + 0.587 * dd[plane + i] + 0.114 * dd[2 * plane + i];
        const double gc = 0.299 * cd[i] + 0.587 * cd[plane + i] + 0.114 * cd[2 * plane + i];
        const double d = (gc - gd) / (gc + cfg.eps);
        diff[static_cast<std::size_t>(i)] = d > 0.0 ? d : 0.0;
    }

    const int r = cfg.window / 2;
    const double inv_area = 1.0 / (static_cast<double>(cfg.window) * cfg.window);
    Tensor mask = Tensor::zeros({1, 1, h, w});
    double* m = mask.data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ky = -r; ky <= r; ++ky) {
                const int iy = y + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = -r; kx <= r; ++kx) {
                    const int ix = x + kx;
                    if (ix < 0 || ix >= w) continue;
                    acc += diff[static_cast<std::size_t>(iy) * w + ix];
                }
            }
            m[std::int64_t(y) * w + x] = acc * inv_area > cfg.tau ? 1.0 : 0.0;
        }
    return mask;
}

Tensor mask_loss(const Tensor& pred, const Tensor& mgt) {
    check_same_shape(pred, mgt, "mask_loss");
    return mean_all(abs_val(sub(pred, mgt)));
}

LossTerms total_loss(const Tensor& out, const Tensor& gt, const std::optional<Tensor>& pred_mask,
                     const std::optional<Tensor>& mgt, const LossWeights& weights,
                     const PerceptualExtractor& phi) {
    if (weights.alpha1 < 0 || weights.alpha2 < 0 || weights.alpha3 < 0 ||
        weights.lambda_mask < 0)
        throw ContractError("total_loss: loss weights must be nonnegative");
    LossTerms t;
    Tensor rec = rec_loss(out, gt);
    Tensor ssim = ssim_loss(out, gt);
    Tensor grad = grad_loss(out, gt);
    Tensor perc = perc_loss(out, gt, phi);
    t.rec = rec.item();
    t.ssim = ssim.item();
    t.grad = grad.item();
    t.perc = perc.item();
    Tensor total = add(rec, add(affine(ssim, weights.alpha1, 0.0),
                                add(affine(grad, weights.alpha2, 0.0),
                                    affine(perc, weights.alpha3, 0.0))));
    if (pred_mask && mgt) {
        Tensor m = mask_loss(*pred_mask, *mgt);
        t.mask = m.item();
        total = add(total, affine(m, weights.lambda_mask, 0.0));
    }
    t.total = total;
    return t;
}

}  // namespace ubn
