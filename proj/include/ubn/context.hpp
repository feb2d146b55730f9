#pragma once

#include "ubn/tensor.hpp"

namespace ubn {

/// Global context branch over the raw input image: a stem conv followed by
/// chained depthwise convolutions of growing kernel size (3 -> 7 -> 11),
/// summed and projected. The chain expands the receptive field to Chebyshev
/// radius 1 + 3 + 5 = 9 while staying cheap.
struct ContextParams {
    Tensor stem_w, stem_b;    // conv3x3 3->Cg
    Tensor dw7_w, dw7_b;      // depthwise 7x7
    Tensor dw11_w, dw11_b;    // depthwise 11x11
    Tensor proj_w, proj_b;    // conv1x1 Cg->Cg

    static ContextParams init(int context_channels, Rng& rng);
    static ContextParams zeros(int context_channels);
    int channels() const { return stem_w.extent(0); }
    std::int64_t param_count() const;
};

/// y0 = relu(stem(img)); y1 = dw7(y0); y2 = dw11(y1); out = proj(y0+y1+y2).
/// Requires H, W >= 11.
Tensor context_forward(const Tensor& img, const ContextParams& params);

}  // namespace ubn
