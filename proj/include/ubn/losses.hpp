#pragma once

#include <optional>

#include "ubn/tensor.hpp"

namespace ubn {

/// Term weights of the training objective. All L1 terms are means over
/// elements so magnitudes are resolution-independent.
struct LossWeights {
    double alpha1 = 0.2;    // structural similarity
    double alpha2 = 0.1;    // gradient consistency
    double alpha3 = 0.01;   // perceptual
    double lambda_mask = 0.5;
};

struct PseudoMaskConfig {
    double eps = 1e-3;  // stabilizer in the relative difference
    int window = 7;     // box-filter side, odd
    double tau = 0.1;   // threshold
};

/// Frozen random-weight feature extractor: three stride-2 3x3 convolutions
/// (3 -> 8 -> 16 -> 32) with relu, weights drawn once from a fixed seed and
/// never trained.
struct PerceptualExtractor {
    Tensor w1, b1, w2, b2, w3, b3;
    PerceptualExtractor();
};

/// Mean absolute error.
Tensor rec_loss(const Tensor& out, const Tensor& gt);

/// 1 - mean SSIM, 11x11 Gaussian window sigma 1.5, C1=0.01^2, C2=0.03^2,
/// valid windows, per channel then averaged. Differentiable.
Tensor ssim_loss(const Tensor& out, const Tensor& gt);

/// Mean of the two L1 terms over forward differences along x and y.
Tensor grad_loss(const Tensor& out, const Tensor& gt);

/// Mean L1 between frozen feature maps, averaged over the three layers.
Tensor perc_loss(const Tensor& out, const Tensor& gt, const PerceptualExtractor& phi);

/// Binary supervision mask from the positive relative grayscale difference,
/// box-averaged (zero padded) and thresholded. Not differentiable.
/// Inputs must be [1,3,H,W] with values in [0,1]; output is [1,1,H,W].
Tensor build_pseudo_mask(const Tensor& degraded, const Tensor& clean,
                         const PseudoMaskConfig& cfg = {});

/// Mean absolute error between the predicted soft mask and the binary target.
Tensor mask_loss(const Tensor& pred, const Tensor& mgt);

struct LossTerms {
    Tensor total;
    double rec = 0, ssim = 0, grad = 0, perc = 0, mask = 0;
};

/// rec + a1*ssim + a2*grad + a3*perc + lambda*mask. The mask term is skipped
/// when either mask tensor is absent.
LossTerms total_loss(const Tensor& out, const Tensor& gt, const std::optional<Tensor>& pred_mask,
                     const std::optional<Tensor>& mgt, const LossWeights& weights,
                     const PerceptualExtractor& phi);

}  // namespace ubn
