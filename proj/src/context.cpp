#include "ubn/context.hpp"

namespace ubn {

ContextParams ContextParams::init(int context_channels, Rng& rng) {
    const int cg = context_channels;
    ContextParams p;
    p.stem_w = Tensor::he_normal({cg, 3, 3, 3}, 3 * 9, rng, true);
    p.stem_b = Tensor::zeros({cg}, true);
    p.dw7_w = Tensor::he_normal({cg, 1, 7, 7}, 49, rng, true);
    p.dw7_b = Tensor::zeros({cg}, true);
    p.dw11_w = Tensor::he_normal({cg, 1, 11, 11}, 121, rng, true);
    p.dw11_b = Tensor::zeros({cg}, true);
    // zero projection: the branch fades in during training
    p.proj_w = Tensor::zeros({cg, cg, 1, 1}, true);
    p.proj_b = Tensor::zeros({cg}, true);
    return p;
}

ContextParams ContextParams::zeros(int context_channels) {
    const int cg = context_channels;
    ContextParams p;
    p.stem_w = Tensor::zeros({cg, 3, 3, 3}, true);
    p.stem_b = Tensor::zeros({cg}, true);
    p.dw7_w = Tensor::zeros({cg, 1, 7, 7}, true);
    p.dw7_b = Tensor::zeros({cg}, true);
    p.dw11_w = Tensor::zeros({cg, 1, 11, 11}, true);
    p.dw11_b = Tensor::zeros({cg}, true);
    p.proj_w = Tensor::zeros({cg, cg, 1, 1}, true);
    p.proj_b = Tensor::zeros({cg}, true);
    return p;
}

std::int64_t ContextParams::param_count() const {
    return stem_w.numel() + stem_b.numel() + dw7_w.numel() + dw7_b.numel() + dw11_w.numel() +
           dw11_b.numel() + proj_w.numel() + proj_b.numel();
}

Tensor context_forward(const Tensor& img, const ContextParams& params) {
    if (img.rank() != 4 || img.extent(1) != 3)
        throw ShapeError("context_forward: input must be [N,3,H,W]");
    if (img.extent(2) < 11 || img.extent(3) < 11)
        throw ShapeError("context_forward: spatial extents must be >= 11, got " +
                         shape_str(img.shape()));
    const int cg = params.channels();
    Tensor y0 = relu(conv2d(img, params.stem_w, params.stem_b, 1, 1));
    Tensor y1 = conv2d(y0, params.dw7_w, params.dw7_b, 1, 3, cg);
    Tensor y2 = conv2d(y1, params.dw11_w, params.dw11_b, 1, 5, cg);
    return conv2d(add(add(y0, y1), y2), params.proj_w, params.proj_b, 1, 0);
}

}  // namespace ubn
