#include "ubn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ubn/losses.hpp"
#include "ubn/model.hpp"
#include "ubn/wavelet.hpp"

namespace ubn {

namespace {

double rel_err(double a, double n) {
    return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-6});
}

// Uniform magnitude in [0.1, 1) with random sign; keeps relu/abs kinks and
// div denominators away from zero.
Tensor random_signed(const Shape& shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[i] = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
    return t;
}

}  // namespace

double check_gradient(const std::function<Tensor()>& forward_scalar, Tensor leaf, double h,
                      int max_entries, Rng& rng) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
    Graph graph;
    {
        Recording rec(graph);
        Tensor loss = forward_scalar();
        graph.backward(loss);
    }
    std::vector<double> analytic(static_cast<std::size_t>(leaf.numel()), 0.0);
    if (leaf.has_grad())
        std::copy_n(leaf.grad_data(), leaf.numel(), analytic.begin());

    std::vector<std::int64_t> entries;
    if (leaf.numel() <= max_entries) {
        for (std::int64_t i = 0; i < leaf.numel(); ++i) entries.push_back(i);
    } else {
        for (int i = 0; i < max_entries; ++i)
            entries.push_back(static_cast<std::int64_t>(
                rng.below(static_cast<std::uint64_t>(leaf.numel()))));
    }

    double worst = 0.0;
    for (std::int64_t idx : entries) {
        const double saved = leaf.data()[idx];
        leaf.data()[idx] = saved + h;
        const double lp = forward_scalar().item();
        leaf.data()[idx] = saved - h;
        const double lm = forward_scalar().item();
        leaf.data()[idx] = saved;
        const double numeric = (lp - lm) / (2.0 * h);
        worst = std::max(worst, rel_err(analytic[static_cast<std::size_t>(idx)], numeric));
    }
    return worst;
}

namespace {

// Reduce a tensor to a scalar through fixed random weights so transposition
// mistakes in a VJP cannot cancel out.
Tensor weighted_sum(const Tensor& y, const Tensor& coeffs) { return sum_all(mul(y, coeffs)); }

struct Suite {
    GradCheckOptions opt;
    Rng rng;
    std::vector<GradCheckResult> results;

    explicit Suite(const GradCheckOptions& o) : opt(o), rng(o.seed) {}

    void run(const std::string& name, const std::function<Tensor()>& fwd, Tensor leaf,
             int max_entries = 24) {
        GradCheckResult r;
        r.op = name;
        r.max_rel_err = check_gradient(fwd, leaf, opt.h, max_entries, rng);
        r.pass = r.max_rel_err <= opt.tol;
        results.push_back(r);
    }
};

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& opt) {
    Suite s(opt);
    Rng& rng = s.rng;

    {
        Tensor a = random_signed({2, 3, 4, 5}, rng);
        Tensor b = random_signed({2, 3, 4, 5}, rng);
        Tensor cw = random_signed({2, 3, 4, 5}, rng);
        s.run("add", [&] { return weighted_sum(add(a, b), cw); }, a);
        s.run("sub_b", [&] { return weighted_sum(sub(a, b), cw); }, b);
        s.run("mul", [&] { return weighted_sum(mul(a, b), cw); }, a);
        s.run("div_b", [&] { return weighted_sum(div(a, b), cw); }, b);
    }
    {
        // broadcast: per-channel weights and a single-channel spatial map
        Tensor a = random_signed({2, 4, 3, 3}, rng);
        Tensor bc = random_signed({2, 4, 1, 1}, rng);
        Tensor bs = random_signed({2, 1, 3, 3}, rng);
        Tensor cw = random_signed({2, 4, 3, 3}, rng);
        s.run("mul_bcast_chan", [&] { return weighted_sum(mul(a, bc), cw); }, bc);
        s.run("mul_bcast_spatial", [&] { return weighted_sum(mul(a, bs), cw); }, bs);
    }
    {
        Tensor x = random_signed({1, 2, 5, 5}, rng);
        Tensor cw = random_signed({1, 2, 5, 5}, rng);
        s.run("relu", [&] { return weighted_sum(relu(x), cw); }, x);
        s.run("sigmoid", [&] { return weighted_sum(sigmoid(x), cw); }, x);
        s.run("abs", [&] { return weighted_sum(abs_val(x), cw); }, x);
        s.run("affine", [&] { return weighted_sum(affine(x, 1.7, -0.3), cw); }, x);
    }
    {
        Tensor x = random_signed({1, 2, 5, 5}, rng);
        Tensor w = random_signed({3, 2, 3, 3}, rng);
        Tensor b = random_signed({3}, rng);
        Tensor cw = random_signed({1, 3, 5, 5}, rng);
        auto fwd = [&] { return weighted_sum(conv2d(x, w, b, 1, 1), cw); };
        s.run("conv2d_x", fwd, x);
        s.run("conv2d_w", fwd, w);
        s.run("conv2d_b", fwd, b);
    }
    {
        Tensor x = random_signed({1, 2, 6, 6}, rng);
        Tensor w = random_signed({4, 2, 3, 3}, rng);
        Tensor b = random_signed({4}, rng);
        Tensor cw = random_signed({1, 4, 3, 3}, rng);
        s.run("conv2d_stride2", [&] { return weighted_sum(conv2d(x, w, b, 2, 1), cw); }, x);
    }
    {
        Tensor x = random_signed({1, 3, 5, 5}, rng);
        Tensor w = random_signed({3, 1, 3, 3}, rng);
        Tensor b = random_signed({3}, rng);
        Tensor cw = random_signed({1, 3, 5, 5}, rng);
        auto fwd = [&] { return weighted_sum(conv2d(x, w, b, 1, 1, 3), cw); };
        s.run("conv2d_depthwise_x", fwd, x);
        s.run("conv2d_depthwise_w", fwd, w);
    }
    {
        Tensor x = random_signed({2, 3}, rng);
        Tensor w = random_signed({4, 3}, rng);
        Tensor b = random_signed({4}, rng);
        Tensor cw = random_signed({2, 4}, rng);
        auto fwd = [&] { return weighted_sum(linear(x, w, b), cw); };
        s.run("linear_x", fwd, x);
        s.run("linear_w", fwd, w);
        s.run("linear_b", fwd, b);
    }
    {
        Tensor x = random_signed({1, 2, 3, 3}, rng);
        Tensor cw = random_signed({1, 2, 1, 1}, rng);
        s.run("global_avg_pool", [&] { return weighted_sum(global_avg_pool(x), cw); }, x);
    }
    {
        Tensor x = random_signed({1, 2, 4, 4}, rng);
        Tensor cw2 = random_signed({1, 2, 2, 2}, rng);
        Tensor cw1 = random_signed({1, 2, 1, 1}, rng);
        Tensor cwu = random_signed({1, 2, 6, 5}, rng);
        s.run("bilinear_down2", [&] { return weighted_sum(bilinear_down2(x), cw2); }, x);
        s.run("bilinear_down4", [&] { return weighted_sum(bilinear_down4(x), cw1); }, x);
        s.run("bilinear_up_to", [&] { return weighted_sum(bilinear_up_to(x, 6, 5), cwu); }, x);
    }
    {
        Tensor a = random_signed({1, 2, 3, 3}, rng);
        Tensor b = random_signed({1, 3, 3, 3}, rng);
        Tensor cw = random_signed({1, 5, 3, 3}, rng);
        auto fwd = [&] { return weighted_sum(concat_channels(a, b), cw); };
        s.run("concat_a", fwd, a);
        s.run("concat_b", fwd, b);
        Tensor cws = random_signed({1, 2, 3, 3}, rng);
        s.run("slice_channels", [&] { return weighted_sum(slice_channels(b, 1, 3), cws); }, b);
        Tensor cwc = random_signed({1, 3, 2, 2}, rng);
        s.run("crop_spatial", [&] { return weighted_sum(crop_spatial(b, 0, 2, 1, 3), cwc); }, b);
        Tensor cwr = random_signed({9, 2}, rng);
        s.run("reshape", [&] { return weighted_sum(reshape(a, {9, 2}), cwr); }, a);
        s.run("sum_all", [&] { return sum_all(a); }, a);
        s.run("mean_all", [&] { return mean_all(a); }, a);
    }
    {
        Tensor x = random_signed({1, 2, 6, 6}, rng);
        Tensor clf = random_signed({1, 2, 3, 3}, rng);
        Tensor chf = random_signed({1, 6, 3, 3}, rng);
        s.run("dwt_haar",
              [&] {
                  DwtBands bands = dwt_haar(x);
                  return add(weighted_sum(bands.lf, clf), weighted_sum(bands.hf, chf));
              },
              x);
        Tensor lf = random_signed({1, 2, 3, 3}, rng);
        Tensor hf = random_signed({1, 6, 3, 3}, rng);
        Tensor cwi = random_signed({1, 2, 6, 6}, rng);
        auto ifwd = [&] { return weighted_sum(idwt_haar({lf, hf}), cwi); };
        s.run("idwt_haar_lf", ifwd, lf);
        s.run("idwt_haar_hf", ifwd, hf);
    }
    {
        // losses with respect to the restored image
        Tensor out = Tensor::uniform({1, 3, 12, 12}, 0.1, 0.9, rng);
        Tensor gt = Tensor::uniform({1, 3, 12, 12}, 0.1, 0.9, rng);
        Tensor pm = Tensor::uniform({1, 1, 12, 12}, 0.1, 0.9, rng);
        Tensor mg = Tensor::zeros({1, 1, 12, 12});
        for (std::int64_t i = 0; i < mg.numel(); ++i)
            mg.data()[i] = rng.below(2) ? 1.0 : 0.0;
        PerceptualExtractor phi;
        s.run("rec_loss", [&] { return rec_loss(out, gt); }, out, 12);
        s.run("ssim_loss", [&] { return ssim_loss(out, gt); }, out, 12);
        s.run("grad_loss", [&] { return grad_loss(out, gt); }, out, 12);
        s.run("perc_loss", [&] { return perc_loss(out, gt, phi); }, out, 12);
        s.run("mask_loss", [&] { return mask_loss(pm, mg); }, pm, 12);
    }
    {
        // full model composite: 20 sampled parameters, default full config
        ModelConfig cfg;
        ModelParams params = ModelParams::init(cfg, opt.seed + 77);
        Tensor inp = Tensor::uniform({1, 3, 32, 32}, 0.05, 0.95, rng);
        Tensor gt = Tensor::uniform({1, 3, 32, 32}, 0.05, 0.95, rng);
        Tensor mgt = Tensor::zeros({1, 1, 32, 32});
        for (std::int64_t i = 0; i < mgt.numel(); ++i)
            mgt.data()[i] = rng.below(2) ? 1.0 : 0.0;
        PerceptualExtractor phi;
        LossWeights weights;
        auto fwd = [&]() -> Tensor {
            ForwardOutput out = forward(inp, params);
            return total_loss(out.restored, gt, out.mask, mgt, weights, phi).total;
        };
        std::vector<Tensor> tensors;
        params.visit([&](const std::string&, Tensor& t) { tensors.push_back(t); });

        Graph graph;
        {
            Recording rec(graph);
            Tensor loss = fwd();
            graph.backward(loss);
        }
        double worst = 0.0;
        for (int i = 0; i < 20; ++i) {
            Tensor t = tensors[static_cast<std::size_t>(rng.below(tensors.size()))];
            const std::int64_t idx =
                static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t.numel())));
            const double analytic = t.has_grad() ? t.grad_data()[idx] : 0.0;
            const double saved = t.data()[idx];
            t.data()[idx] = saved + opt.h;
            const double lp = fwd().item();
            t.data()[idx] = saved - opt.h;
            const double lm = fwd().item();
            t.data()[idx] = saved;
            worst = std::max(worst, rel_err(analytic, (lp - lm) / (2.0 * opt.h)));
        }
        params.visit([&](const std::string&, Tensor& t) { t.zero_grad(); });
        GradCheckResult r;
        r.op = "full_model";
        r.max_rel_err = worst;
        r.pass = worst <= opt.tol;
        s.results.push_back(r);
    }
    return s.results;
}

}  // namespace ubn
