#include "ubn/wavelet.hpp"

#include <cmath>

namespace ubn {

namespace {

template <typename F>
void dispatch(F&& f) {
    if (compute_precision() == Precision::f64)
        f.template operator()<double>();
    else
        f.template operator()<float>();
}

// Forward transform of one plane pair; outputs may be accumulated (+=) or
// assigned depending on `accumulate` (accumulation serves the idwt VJP).
template <typename S, bool Accumulate>
void haar_fwd_plane(const double* x, int h, int w, double* ll, double* lh, double* hl,
                    double* hh) {
    const int ho = h / 2, wo = w / 2;
    for (int oy = 0; oy < ho; ++oy) {
        const double* r0 = x + std::int64_t(2 * oy) * w;
        const double* r1 = r0 + w;
        for (int ox = 0; ox < wo; ++ox) {
            const S a = static_cast<S>(r0[2 * ox]);
            const S b = static_cast<S>(r0[2 * ox + 1]);
            const S c = static_cast<S>(r1[2 * ox]);
            const S d = static_cast<S>(r1[2 * ox + 1]);
            const std::int64_t o = std::int64_t(oy) * wo + ox;
            const double vll = static_cast<double>((a + b + c + d) * S(0.5));
            const double vlh = static_cast<double>((a - b + c - d) * S(0.5));
            const double vhl = static_cast<double>((a + b - c - d) * S(0.5));
            const double vhh = static_cast<double>((a - b - c + d) * S(0.5));
            if constexpr (Accumulate) {
                ll[o] += vll;
                lh[o] += vlh;
                hl[o] += vhl;
                hh[o] += vhh;
            } else {
                ll[o] = vll;
                lh[o] = vlh;
                hl[o] = vhl;
                hh[o] = vhh;
            }
        }
    }
}

template <typename S, bool Accumulate>
void haar_inv_plane(const double* ll, const double* lh, const double* hl, const double* hh,
                    int h, int w, double* x) {
    const int ho = h / 2, wo = w / 2;
    for (int oy = 0; oy < ho; ++oy) {
        double* r0 = x + std::int64_t(2 * oy) * w;
        double* r1 = r0 + w;
        for (int ox = 0; ox < wo; ++ox) {
            const std::int64_t o = std::int64_t(oy) * wo + ox;
            const S vll = static_cast<S>(ll[o]);
            const S vlh = static_cast<S>(lh[o]);
            const S vhl = static_cast<S>(hl[o]);
            const S vhh = static_cast<S>(hh[o]);
            const double a = static_cast<double>((vll + vlh + vhl + vhh) * S(0.5));
            const double b = static_cast<double>((vll - vlh + vhl - vhh) * S(0.5));
            const double c = static_cast<double>((vll + vlh - vhl - vhh) * S(0.5));
            const double d = static_cast<double>((vll - vlh - vhl + vhh) * S(0.5));
            if constexpr (Accumulate) {
                r0[2 * ox] += a;
                r0[2 * ox + 1] += b;
                r1[2 * ox] += c;
                r1[2 * ox + 1] += d;
            } else {
                r0[2 * ox] = a;
                r0[2 * ox + 1] = b;
                r1[2 * ox] = c;
                r1[2 * ox + 1] = d;
            }
        }
    }
}

}  // namespace

DwtBands dwt_haar(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("dwt_haar: operand must be rank 4");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("dwt_haar: spatial extents must be even, got " + shape_str(x.shape()));
    const int ho = h / 2, wo = w / 2;
    const std::int64_t po = std::int64_t(ho) * wo;
    DwtBands bands;
    bands.lf = make_op_output({n, c, ho, wo});
    bands.hf = make_op_output({n, 3 * c, ho, wo});
    dispatch([&]<typename S>() {
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const double* xp = x.data() + (std::int64_t(i) * c + ch) * h * w;
                double* ll = bands.lf.data() + (std::int64_t(i) * c + ch) * po;
                double* lh = bands.hf.data() + (std::int64_t(i) * 3 * c + ch) * po;
                double* hl = bands.hf.data() + (std::int64_t(i) * 3 * c + c + ch) * po;
                double* hh = bands.hf.data() + (std::int64_t(i) * 3 * c + 2 * c + ch) * po;
                haar_fwd_plane<S, false>(xp, h, w, ll, lh, hl, hh);
            }
    });
    if (recording_wanted({&x})) {
        bands.lf.set_requires_grad(true);
        bands.hf.set_requires_grad(true);
        Tensor xv = x, lfv = bands.lf, hfv = bands.hf;
        // Orthonormal basis: the adjoint of the forward map is the inverse map.
        Graph::active()->record({bands.lf, bands.hf}, [xv, lfv, hfv, n, c, h, w, po]() mutable {
            const double* glf = lfv.grad_data();
            const double* ghf = hfv.grad_data();
            if (!glf && !ghf) return;
            Tensor zlf, zhf;
            if (!glf) {
                zlf = Tensor::zeros(lfv.shape());
                glf = zlf.data();
            }
            if (!ghf) {
                zhf = Tensor::zeros(hfv.shape());
                ghf = zhf.data();
            }
            double* dx = xv.ensure_grad();
            dispatch([&]<typename S>() {
                for (int i = 0; i < n; ++i)
                    for (int ch = 0; ch < c; ++ch) {
                        const double* ll = glf + (std::int64_t(i) * c + ch) * po;
                        const double* lh = ghf + (std::int64_t(i) * 3 * c + ch) * po;
                        const double* hl = ghf + (std::int64_t(i) * 3 * c + c + ch) * po;
                        const double* hh = ghf + (std::int64_t(i) * 3 * c + 2 * c + ch) * po;
                        double* dxp = dx + (std::int64_t(i) * c + ch) * h * w;
                        haar_inv_plane<S, true>(ll, lh, hl, hh, h, w, dxp);
                    }
            });
        });
    }
    return bands;
}

Tensor idwt_haar(const DwtBands& bands) {
    const Tensor& lf = bands.lf;
    const Tensor& hf = bands.hf;
    if (!lf.defined() || !hf.defined() || lf.rank() != 4 || hf.rank() != 4)
        throw ShapeError("idwt_haar: bands must be defined rank-4 tensors");
    const int n = lf.extent(0), c = lf.extent(1), ho = lf.extent(2), wo = lf.extent(3);
    if (hf.extent(0) != n || hf.extent(1) != 3 * c || hf.extent(2) != ho || hf.extent(3) != wo)
        throw ShapeError("idwt_haar: inconsistent band shapes " + shape_str(lf.shape()) +
                         " vs " + shape_str(hf.shape()));
    const int h = 2 * ho, w = 2 * wo;
    const std::int64_t po = std::int64_t(ho) * wo;
    Tensor out = make_op_output({n, c, h, w});
    dispatch([&]<typename S>() {
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const double* ll = lf.data() + (std::int64_t(i) * c + ch) * po;
                const double* lh = hf.data() + (std::int64_t(i) * 3 * c + ch) * po;
                const double* hl = hf.data() + (std::int64_t(i) * 3 * c + c + ch) * po;
                const double* hh = hf.data() + (std::int64_t(i) * 3 * c + 2 * c + ch) * po;
                double* xp = out.data() + (std::int64_t(i) * c + ch) * h * w;
                haar_inv_plane<S, false>(ll, lh, hl, hh, h, w, xp);
            }
    });
    if (recording_wanted({&lf, &hf})) {
        out.set_requires_grad(true);
        Tensor lfv = lf, hfv = hf, ov = out;
        Graph::active()->record({out}, [lfv, hfv, ov, n, c, h, w, po]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dlf = lfv.requires_grad() ? lfv.ensure_grad() : nullptr;
            double* dhf = hfv.requires_grad() ? hfv.ensure_grad() : nullptr;
            if (!dlf && !dhf) return;
            Tensor scratch_lf, scratch_hf;
            if (!dlf) {
                scratch_lf = Tensor::zeros(lfv.shape());
                dlf = scratch_lf.data();
            }
            if (!dhf) {
                scratch_hf = Tensor::zeros(hfv.shape());
                dhf = scratch_hf.data();
            }
            dispatch([&]<typename S>() {
                for (int i = 0; i < n; ++i)
                    for (int ch = 0; ch < c; ++ch) {
                        const double* gp = go + (std::int64_t(i) * c + ch) * h * w;
                        double* ll = dlf + (std::int64_t(i) * c + ch) * po;
                        double* lh = dhf + (std::int64_t(i) * 3 * c + ch) * po;
                        double* hl = dhf + (std::int64_t(i) * 3 * c + c + ch) * po;
                        double* hh = dhf + (std::int64_t(i) * 3 * c + 2 * c + ch) * po;
                        haar_fwd_plane<S, true>(gp, h, w, ll, lh, hl, hh);
                    }
            });
        });
    }
    return out;
}

}  // namespace ubn
