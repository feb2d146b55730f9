#include "ubn/metrics.hpp"

#include <cmath>
#include <vector>

namespace ubn {

double psnr(const Tensor& a, const Tensor& b, double peak) {
    if (a.shape() != b.shape())
        throw ShapeError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    if (peak <= 0.0) throw ContractError("psnr: peak must be positive");
    const std::int64_t n = a.numel();
    const double* pa = a.data();
    const double* pb = b.data();
    double mse = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pa[i] - pb[i];
        mse += d * d;
    }
    mse /= static_cast<double>(n);
    if (mse == 0.0) return 99.0;
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim_metric(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("ssim_metric: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    if (a.rank() != 4) throw ShapeError("ssim_metric: operands must be rank 4");
    const int n = a.extent(0), c = a.extent(1), h = a.extent(2), w = a.extent(3);
    constexpr int k = 11;
    if (h < k || w < k)
        throw ShapeError("ssim_metric: spatial extents must be >= 11, got " +
                         shape_str(a.shape()));
    constexpr double sigma = 1.5;
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double win[k * k];
    double wsum = 0.0;
    for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
            const double dy = y - (k - 1) / 2.0, dx = x - (k - 1) / 2.0;
            win[y * k + x] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            wsum += win[y * k + x];
        }
    for (double& v : win) v /= wsum;

    const int ho = h - k + 1, wo = w - k + 1;
    const std::int64_t plane = std::int64_t(h) * w;
    double total = 0.0;
    std::int64_t count = 0;
    for (int i = 0; i < n * c; ++i) {
        const double* pa = a.data() + i * plane;
        const double* pb = b.data() + i * plane;
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = win[ky * k + kx];
                        const double va = pa[std::int64_t(oy + ky) * w + ox + kx];
                        const double vb = pb[std::int64_t(oy + ky) * w + ox + kx];
                        mx += wv * va;
                        my += wv * vb;
                        xx += wv * va * va;
                        yy += wv * vb * vb;
                        xy += wv * va * vb;
                    }
                const double var_x = xx - mx * mx;
                const double var_y = yy - my * my;
                const double cov = xy - mx * my;
                const double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                const double den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
                total += num / den;
                ++count;
            }
    }
    return total / static_cast<double>(count);
}

}  // namespace ubn
