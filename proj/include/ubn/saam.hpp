#pragma once

#include "ubn/tensor.hpp"

namespace ubn {

/// Scale-aware aggregation at the bottleneck: three-level pyramid, one shared
/// two-conv branch applied per level, per-scale channel weights from a small
/// MLP, residual fusion back onto the input.
struct SaamParams {
    Tensor branch1_w, branch1_b;  // conv3x3 C->C
    Tensor branch2_w, branch2_b;  // conv3x3 C->C
    Tensor mlp_hidden_w, mlp_hidden_b;  // 3C -> ceil(3C/2)
    Tensor mlp_out_w, mlp_out_b;        // ceil(3C/2) -> 3C

    static SaamParams init(int channels, Rng& rng);
    static SaamParams zeros(int channels);
    int channels() const { return branch1_w.extent(0); }
    std::int64_t param_count() const;
};

struct PyramidLevels {
    Tensor x0;  // [N,C,H,W]
    Tensor x1;  // [N,C,H/2,W/2]
    Tensor x2;  // [N,C,H/4,W/4]
};

struct ScaleWeights {
    Tensor w0, w1, w2;  // each [N,C,1,1], values in (0,1)
};

/// x0 = x, x1 = down2(x), x2 = down4(x). Requires H, W divisible by 4.
PyramidLevels build_pyramid(const Tensor& x);

/// Pools the processed levels (already at full resolution), concatenates the
/// descriptors and maps them through the gating MLP; sigmoid per scale.
ScaleWeights scale_weights(const Tensor& y0, const Tensor& y1, const Tensor& y2,
                           const SaamParams& params);

/// x + w0*Y0 + w1*up(Y1) + w2*up(Y2), weights broadcast over space.
Tensor saam_forward(const Tensor& x, const SaamParams& params);

}  // namespace ubn
