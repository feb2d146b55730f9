#pragma once

#include "ubn/tensor.hpp"

namespace ubn {

/// 10*log10(peak^2 / MSE), computed in double regardless of engine mode.
/// Zero MSE returns the 99.0 dB cap.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, C1=0.01^2,
/// C2=0.03^2), per channel then averaged. Plain double loops, independent of
/// the differentiable loss implementation.
double ssim_metric(const Tensor& a, const Tensor& b);

}  // namespace ubn
