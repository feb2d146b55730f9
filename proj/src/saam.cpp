#include "ubn/saam.hpp"

namespace ubn {

namespace {
int mlp_hidden_width(int c) { return (3 * c + 1) / 2; }
}

SaamParams SaamParams::init(int channels, Rng& rng) {
    const int c = channels, hid = mlp_hidden_width(c);
    SaamParams p;
    // half-scale first conv keeps the pyramid branch gentle at this depth
    p.branch1_w = Tensor::he_normal({c, c, 3, 3}, c * 9, rng, true);
    for (std::int64_t i = 0; i < p.branch1_w.numel(); ++i)
        p.branch1_w.data()[i] = store_rounded(p.branch1_w.data()[i] * 0.5);
    p.branch1_b = Tensor::zeros({c}, true);
    // zero second conv: the module starts as the identity residual
    p.branch2_w = Tensor::zeros({c, c, 3, 3}, true);
    p.branch2_b = Tensor::zeros({c}, true);
    p.mlp_hidden_w = Tensor::he_normal({hid, 3 * c}, 3 * c, rng, true);
    p.mlp_hidden_b = Tensor::zeros({hid}, true);
    p.mlp_out_w = Tensor::he_normal({3 * c, hid}, hid, rng, true);
    p.mlp_out_b = Tensor::zeros({3 * c}, true);
    return p;
}

SaamParams SaamParams::zeros(int channels) {
    const int c = channels, hid = mlp_hidden_width(c);
    SaamParams p;
    p.branch1_w = Tensor::zeros({c, c, 3, 3}, true);
    p.branch1_b = Tensor::zeros({c}, true);
    p.branch2_w = Tensor::zeros({c, c, 3, 3}, true);
    p.branch2_b = Tensor::zeros({c}, true);
    p.mlp_hidden_w = Tensor::zeros({hid, 3 * c}, true);
    p.mlp_hidden_b = Tensor::zeros({hid}, true);
    p.mlp_out_w = Tensor::zeros({3 * c, hid}, true);
    p.mlp_out_b = Tensor::zeros({3 * c}, true);
    return p;
}

std::int64_t SaamParams::param_count() const {
    return branch1_w.numel() + branch1_b.numel() + branch2_w.numel() + branch2_b.numel() +
           mlp_hidden_w.numel() + mlp_hidden_b.numel() + mlp_out_w.numel() + mlp_out_b.numel();
}

PyramidLevels build_pyramid(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("build_pyramid: operand must be rank 4");
    if (x.extent(2) % 4 != 0 || x.extent(3) % 4 != 0)
        throw ShapeError("build_pyramid: spatial extents must be divisible by 4, got " +
                         shape_str(x.shape()));
    PyramidLevels levels;
    levels.x0 = x;
    levels.x1 = bilinear_down2(x);
    levels.x2 = bilinear_down4(x);
    return levels;
}

namespace {

Tensor apply_branch(const Tensor& x, const SaamParams& p) {
    return conv2d(relu(conv2d(x, p.branch1_w, p.branch1_b, 1, 1)), p.branch2_w, p.branch2_b, 1,
                  1);
}

}  // namespace

ScaleWeights scale_weights(const Tensor& y0, const Tensor& y1, const Tensor& y2,
                           const SaamParams& params) {
    const int c = params.channels();
    if (y0.extent(1) != c || y1.extent(1) != c || y2.extent(1) != c)
        throw ShapeError("scale_weights: channel mismatch with branch parameters");
    const int n = y0.extent(0);
    Tensor v = concat_channels(concat_channels(global_avg_pool(y0), global_avg_pool(y1)),
                               global_avg_pool(y2));
    Tensor flat = reshape(v, {n, 3 * c});
    Tensor hidden = relu(linear(flat, params.mlp_hidden_w, params.mlp_hidden_b));
    Tensor gates = sigmoid(linear(hidden, params.mlp_out_w, params.mlp_out_b));
    Tensor gates4 = reshape(gates, {n, 3 * c, 1, 1});
    ScaleWeights w;
    w.w0 = slice_channels(gates4, 0, c);
    w.w1 = slice_channels(gates4, c, 2 * c);
    w.w2 = slice_channels(gates4, 2 * c, 3 * c);
    return w;
}

Tensor saam_forward(const Tensor& x, const SaamParams& params) {
    const int h = x.extent(2), w = x.extent(3);
    PyramidLevels levels = build_pyramid(x);
    Tensor y0 = apply_branch(levels.x0, params);
    Tensor y1 = bilinear_up_to(apply_branch(levels.x1, params), h, w);
    Tensor y2 = bilinear_up_to(apply_branch(levels.x2, params), h, w);
    ScaleWeights sw = scale_weights(y0, y1, y2, params);
    Tensor fused = add(add(mul(y0, sw.w0), mul(y1, sw.w1)), mul(y2, sw.w2));
    return add(x, fused);
}

}  // namespace ubn
