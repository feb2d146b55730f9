#include "ubn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace ubn {

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4)
        throw ShapeError("tensor rank must be 1..4, got " + shape_str(shape));
    for (int e : shape)
        if (e < 1) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

template <typename F>
void dispatch(F&& f) {
    if (compute_precision() == Precision::f64)
        f.template operator()<double>();
    else
        f.template operator()<float>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor make_op_output(const Shape& shape) {
    check_shape(shape);
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = shape;
    t.impl_->data.resize(static_cast<std::size_t>(shape_numel(shape)));  // uninitialized
    t.impl_->leaf = false;
    return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    check_shape(shape);
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = shape;
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::constant(const Shape& shape, double value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), store_rounded(value));
    return t;
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    for (double& v : t.impl_->data) v = store_rounded(rng.uniform(lo, hi));
    return t;
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, std::uint64_t seed,
                       bool requires_grad) {
    Rng rng(seed);
    return uniform(shape, lo, hi, rng, requires_grad);
}

Tensor Tensor::he_normal(const Shape& shape, int fan_in, Rng& rng, bool requires_grad) {
    if (fan_in < 1) throw ContractError("he_normal: fan_in must be positive");
    Tensor t = zeros(shape, requires_grad);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.impl_->data) v = store_rounded(stddev * rng.normal());
    return t;
}

Tensor Tensor::he_normal(const Shape& shape, int fan_in, std::uint64_t seed, bool requires_grad) {
    Rng rng(seed);
    return he_normal(shape, fan_in, rng, requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
        throw ShapeError("from_data: value count does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = shape;
    t.impl_->data.assign(values.begin(), values.end());
    for (double& v : t.impl_->data) v = store_rounded(v);
    t.impl_->requires_grad = requires_grad;
    return t;
}

double* Tensor::ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad.data();
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) +
                                          " elements, expected 1");
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

namespace {
thread_local Graph* g_active_graph = nullptr;
}

Graph* Graph::active() { return g_active_graph; }

Recording::Recording(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
Recording::~Recording() { g_active_graph = prev_; }

void Graph::record(std::vector<Tensor> outputs, std::function<void()> vjp) {
    Node node;
    node.vjp = std::move(vjp);
    node.outputs.reserve(outputs.size());
    for (Tensor& t : outputs) {
        t.impl()->leaf = false;
        node.outputs.push_back(t.impl());
    }
    nodes_.push_back(std::move(node));
}

void Graph::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar of shape [1]");
    for (Node& n : nodes_)
        for (auto& out : n.outputs) out->grad.clear();
    Tensor seed = loss;
    seed.ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->vjp();
}

bool recording_wanted(std::initializer_list<const Tensor*> inputs) {
    if (!Graph::active()) return false;
    for (const Tensor* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

// ---------------------------------------------------------------------------
// elementwise with broadcast (b over a)
// ---------------------------------------------------------------------------

namespace {

enum class EwOp { add, sub, mul, div };

struct BcastDims {
    int ae[4];
    std::int64_t bstride[4];
    bool same;
};

BcastDims ewise_check(const Shape& a, const Shape& b, const char* opname) {
    if (a.size() != b.size())
        throw ShapeError(std::string(opname) + ": rank mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
    BcastDims d{};
    int be[4];
    const int pad = 4 - static_cast<int>(a.size());
    for (int i = 0; i < 4; ++i) {
        d.ae[i] = i < pad ? 1 : a[static_cast<std::size_t>(i - pad)];
        be[i] = i < pad ? 1 : b[static_cast<std::size_t>(i - pad)];
    }
    d.same = true;
    for (int i = 0; i < 4; ++i) {
        if (be[i] != d.ae[i]) {
            if (be[i] != 1)
                throw ShapeError(std::string(opname) + ": shape " + shape_str(b) +
                                 " does not broadcast over " + shape_str(a));
            d.same = false;
        }
    }
    std::int64_t s = 1;
    for (int i = 3; i >= 0; --i) {
        d.bstride[i] = (be[i] == 1) ? 0 : s;
        s *= be[i];
    }
    return d;
}

template <typename S>
S ew_eval(EwOp op, S va, S vb) {
    switch (op) {
        case EwOp::add: return va + vb;
        case EwOp::sub: return va - vb;
        case EwOp::mul: return va * vb;
        case EwOp::div: return va / vb;
    }
    return S(0);
}

template <typename S>
void ewise_forward(EwOp op, const double* a, const double* b, double* y, const BcastDims& d) {
    if (d.same) {
        const std::int64_t n =
            std::int64_t(d.ae[0]) * d.ae[1] * d.ae[2] * d.ae[3];
        for (std::int64_t i = 0; i < n; ++i)
            y[i] = static_cast<double>(ew_eval(op, static_cast<S>(a[i]), static_cast<S>(b[i])));
        return;
    }
    std::int64_t idx = 0;
    for (int i0 = 0; i0 < d.ae[0]; ++i0)
        for (int i1 = 0; i1 < d.ae[1]; ++i1)
            for (int i2 = 0; i2 < d.ae[2]; ++i2) {
                const std::int64_t brow =
                    i0 * d.bstride[0] + i1 * d.bstride[1] + i2 * d.bstride[2];
                for (int i3 = 0; i3 < d.ae[3]; ++i3, ++idx) {
                    const std::int64_t bi = brow + i3 * d.bstride[3];
                    y[idx] = static_cast<double>(
                        ew_eval(op, static_cast<S>(a[idx]), static_cast<S>(b[bi])));
                }
            }
}

template <typename S>
void ewise_backward(EwOp op, const double* go, const double* a, const double* b, double* da,
                    double* db, const BcastDims& d) {
    if (d.same) {
        const std::int64_t n = std::int64_t(d.ae[0]) * d.ae[1] * d.ae[2] * d.ae[3];
        for (std::int64_t i = 0; i < n; ++i) {
            const S g = static_cast<S>(go[i]);
            switch (op) {
                case EwOp::add:
                    if (da) da[i] += static_cast<double>(g);
                    if (db) db[i] += static_cast<double>(g);
                    break;
                case EwOp::sub:
                    if (da) da[i] += static_cast<double>(g);
                    if (db) db[i] -= static_cast<double>(g);
                    break;
                case EwOp::mul:
                    if (da) da[i] += static_cast<double>(g * static_cast<S>(b[i]));
                    if (db) db[i] += static_cast<double>(g * static_cast<S>(a[i]));
                    break;
                case EwOp::div: {
                    const S vb = static_cast<S>(b[i]);
                    if (da) da[i] += static_cast<double>(g / vb);
                    if (db)
                        db[i] -= static_cast<double>(g * static_cast<S>(a[i]) / (vb * vb));
                    break;
                }
            }
        }
        return;
    }
    std::int64_t idx = 0;
    for (int i0 = 0; i0 < d.ae[0]; ++i0)
        for (int i1 = 0; i1 < d.ae[1]; ++i1)
            for (int i2 = 0; i2 < d.ae[2]; ++i2) {
                const std::int64_t brow =
                    i0 * d.bstride[0] + i1 * d.bstride[1] + i2 * d.bstride[2];
                for (int i3 = 0; i3 < d.ae[3]; ++i3, ++idx) {
                    const std::int64_t bi = brow + i3 * d.bstride[3];
                    const S g = static_cast<S>(go[idx]);
                    switch (op) {
                        case EwOp::add:
                            if (da) da[idx] += static_cast<double>(g);
                            if (db) db[bi] += static_cast<double>(g);
                            break;
                        case EwOp::sub:
                            if (da) da[idx] += static_cast<double>(g);
                            if (db) db[bi] -= static_cast<double>(g);
                            break;
                        case EwOp::mul:
                            if (da) da[idx] += static_cast<double>(g * static_cast<S>(b[bi]));
                            if (db) db[bi] += static_cast<double>(g * static_cast<S>(a[idx]));
                            break;
                        case EwOp::div: {
                            const S vb = static_cast<S>(b[bi]);
                            if (da) da[idx] += static_cast<double>(g / vb);
                            if (db)
                                db[bi] -= static_cast<double>(g * static_cast<S>(a[idx]) /
                                                              (vb * vb));
                            break;
                        }
                    }
                }
            }
}

Tensor ewise_op(EwOp op, const char* name, const Tensor& a, const Tensor& b) {
    const BcastDims d = ewise_check(a.shape(), b.shape(), name);
    Tensor out = make_op_output(a.shape());
    dispatch([&]<typename S>() { ewise_forward<S>(op, a.data(), b.data(), out.data(), d); });
    if (recording_wanted({&a, &b})) {
        out.set_requires_grad(true);
        Tensor av = a, bv = b, ov = out;
        Graph::active()->record({out}, [op, av, bv, ov, d]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* da = av.requires_grad() ? av.ensure_grad() : nullptr;
            double* db = bv.requires_grad() ? bv.ensure_grad() : nullptr;
            dispatch([&]<typename S>() {
                ewise_backward<S>(op, go, av.data(), bv.data(), da, db, d);
            });
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return ewise_op(EwOp::add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return ewise_op(EwOp::sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return ewise_op(EwOp::mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return ewise_op(EwOp::div, "div", a, b); }

// ---------------------------------------------------------------------------
// activations and pointwise maps
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    Tensor out = make_op_output(x.shape());
    const std::int64_t n = x.numel();
    const double* xp = x.data();
    double* yp = out.data();
    for (std::int64_t i = 0; i < n; ++i) yp[i] = xp[i] > 0.0 ? xp[i] : 0.0;
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            const double* xp2 = xv.data();
            for (std::int64_t i = 0; i < n; ++i)
                if (xp2[i] > 0.0) dx[i] += go[i];  // subgradient 0 at exactly 0
        });
    }
    return out;
}

namespace {

template <typename S>
S sigmoid_eval(S t) {
    if (t >= S(0)) return S(1) / (S(1) + std::exp(-t));
    const S e = std::exp(t);
    return e / (S(1) + e);
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    Tensor out = make_op_output(x.shape());
    const std::int64_t n = x.numel();
    dispatch([&]<typename S>() {
        const double* xp = x.data();
        double* yp = out.data();
        for (std::int64_t i = 0; i < n; ++i)
            yp[i] = static_cast<double>(sigmoid_eval(static_cast<S>(xp[i])));
    });
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            const double* s = ov.data();
            dispatch([&]<typename S>() {
                for (std::int64_t i = 0; i < n; ++i) {
                    const S sv = static_cast<S>(s[i]);
                    dx[i] += static_cast<double>(static_cast<S>(go[i]) * sv * (S(1) - sv));
                }
            });
        });
    }
    return out;
}

Tensor abs_val(const Tensor& x) {
    Tensor out = make_op_output(x.shape());
    const std::int64_t n = x.numel();
    const double* xp = x.data();
    double* yp = out.data();
    for (std::int64_t i = 0; i < n; ++i) yp[i] = std::fabs(xp[i]);
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            const double* xp2 = xv.data();
            for (std::int64_t i = 0; i < n; ++i) {
                if (xp2[i] > 0.0)
                    dx[i] += go[i];
                else if (xp2[i] < 0.0)
                    dx[i] -= go[i];
            }
        });
    }
    return out;
}

Tensor affine(const Tensor& x, double scale, double shift) {
    Tensor out = make_op_output(x.shape());
    const std::int64_t n = x.numel();
    dispatch([&]<typename S>() {
        const S a = static_cast<S>(scale), c = static_cast<S>(shift);
        const double* xp = x.data();
        double* yp = out.data();
        for (std::int64_t i = 0; i < n; ++i)
            yp[i] = static_cast<double>(a * static_cast<S>(xp[i]) + c);
    });
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n, scale]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            dispatch([&]<typename S>() {
                const S a = static_cast<S>(scale);
                for (std::int64_t i = 0; i < n; ++i)
                    dx[i] += static_cast<double>(a * static_cast<S>(go[i]));
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4)
        throw ShapeError("concat_channels: operands must be rank 4");
    if (a.extent(0) != b.extent(0) || a.extent(2) != b.extent(2) || a.extent(3) != b.extent(3))
        throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int n = a.extent(0), ca = a.extent(1), cb = b.extent(1);
    const int h = a.extent(2), w = a.extent(3);
    const std::int64_t plane = std::int64_t(h) * w;
    Tensor out = make_op_output({n, ca + cb, h, w});
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.data() + (std::int64_t(i) * (ca + cb)) * plane,
                    a.data() + std::int64_t(i) * ca * plane,
                    static_cast<std::size_t>(ca * plane) * sizeof(double));
        std::memcpy(out.data() + (std::int64_t(i) * (ca + cb) + ca) * plane,
                    b.data() + std::int64_t(i) * cb * plane,
                    static_cast<std::size_t>(cb * plane) * sizeof(double));
    }
    if (recording_wanted({&a, &b})) {
        out.set_requires_grad(true);
        Tensor av = a, bv = b, ov = out;
        Graph::active()->record({out}, [av, bv, ov, n, ca, cb, plane]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            if (av.requires_grad()) {
                double* da = av.ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const double* src = go + (std::int64_t(i) * (ca + cb)) * plane;
                    double* dst = da + std::int64_t(i) * ca * plane;
                    for (std::int64_t j = 0; j < ca * plane; ++j) dst[j] += src[j];
                }
            }
            if (bv.requires_grad()) {
                double* db = bv.ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const double* src = go + (std::int64_t(i) * (ca + cb) + ca) * plane;
                    double* dst = db + std::int64_t(i) * cb * plane;
                    for (std::int64_t j = 0; j < cb * plane; ++j) dst[j] += src[j];
                }
            }
        });
    }
    return out;
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
    if (x.rank() != 4) throw ShapeError("slice_channels: operand must be rank 4");
    const int c = x.extent(1);
    if (c0 < 0 || c1 <= c0 || c1 > c)
        throw ShapeError("slice_channels: invalid range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + std::to_string(c) + " channels");
    const int n = x.extent(0), h = x.extent(2), w = x.extent(3), cs = c1 - c0;
    const std::int64_t plane = std::int64_t(h) * w;
    Tensor out = make_op_output({n, cs, h, w});
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data() + std::int64_t(i) * cs * plane,
                    x.data() + (std::int64_t(i) * c + c0) * plane,
                    static_cast<std::size_t>(cs * plane) * sizeof(double));
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n, c, c0, cs, plane]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            for (int i = 0; i < n; ++i) {
                const double* src = go + std::int64_t(i) * cs * plane;
                double* dst = dx + (std::int64_t(i) * c + c0) * plane;
                for (std::int64_t j = 0; j < cs * plane; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor crop_spatial(const Tensor& x, int y0, int y1, int x0, int x1) {
    if (x.rank() != 4) throw ShapeError("crop_spatial: operand must be rank 4");
    const int h = x.extent(2), w = x.extent(3);
    if (y0 < 0 || y1 <= y0 || y1 > h || x0 < 0 || x1 <= x0 || x1 > w)
        throw ShapeError("crop_spatial: window out of range for " + shape_str(x.shape()));
    const int n = x.extent(0), c = x.extent(1), ho = y1 - y0, wo = x1 - x0;
    Tensor out = make_op_output({n, c, ho, wo});
    for (int i = 0; i < n * c; ++i)
        for (int oy = 0; oy < ho; ++oy)
            std::memcpy(out.data() + (std::int64_t(i) * ho + oy) * wo,
                        x.data() + (std::int64_t(i) * h + y0 + oy) * w + x0,
                        static_cast<std::size_t>(wo) * sizeof(double));
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n, c, h, w, y0, x0, ho, wo]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            for (int i = 0; i < n * c; ++i)
                for (int oy = 0; oy < ho; ++oy) {
                    const double* src = go + (std::int64_t(i) * ho + oy) * wo;
                    double* dst = dx + (std::int64_t(i) * h + y0 + oy) * w + x0;
                    for (int ox = 0; ox < wo; ++ox) dst[ox] += src[ox];
                }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    check_shape(shape);
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    Tensor out = make_op_output(shape);
    std::memcpy(out.data(), x.data(), static_cast<std::size_t>(x.numel()) * sizeof(double));
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        const std::int64_t n = x.numel();
        Graph::active()->record({out}, [xv, ov, n]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) dx[i] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: im2col + gemm
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int n, cin, h, w, cout, k, stride, pad, groups, cin_g, cout_g, ho, wo;
};

ConvDims conv_check(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                    int pad, int groups) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be rank 4");
    if (weight.rank() != 4) throw ShapeError("conv2d: weight must be rank 4");
    if (bias.rank() != 1) throw ShapeError("conv2d: bias must be rank 1");
    ConvDims d{};
    d.n = x.extent(0);
    d.cin = x.extent(1);
    d.h = x.extent(2);
    d.w = x.extent(3);
    d.cout = weight.extent(0);
    d.k = weight.extent(2);
    d.stride = stride;
    d.pad = pad;
    d.groups = groups;
    if (weight.extent(3) != d.k) throw ShapeError("conv2d: kernel must be square");
    if (d.k % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd");
    if (stride < 1 || pad < 0 || groups < 1) throw ShapeError("conv2d: bad stride/pad/groups");
    if (d.cin % groups != 0 || d.cout % groups != 0)
        throw ShapeError("conv2d: channels not divisible by groups");
    d.cin_g = d.cin / groups;
    d.cout_g = d.cout / groups;
    if (weight.extent(1) != d.cin_g)
        throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) +
                         " inconsistent with input " + shape_str(x.shape()) + " and groups " +
                         std::to_string(groups));
    if (bias.extent(0) != d.cout) throw ShapeError("conv2d: bias extent != output channels");
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
    if (d.h + 2 * pad - d.k < 0 || d.w + 2 * pad - d.k < 0 || d.ho < 1 || d.wo < 1)
        throw ShapeError("conv2d: kernel does not fit input " + shape_str(x.shape()));
    return d;
}

template <typename S>
void im2col(const double* x, int cin_g, int h, int w, int k, int stride, int pad, int ho, int wo,
            S* col) {
    int row = 0;
    for (int c = 0; c < cin_g; ++c) {
        const double* xc = x + std::int64_t(c) * h * w;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx, ++row) {
                S* dst = col + std::int64_t(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    S* drow = dst + std::int64_t(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ++ox) drow[ox] = S(0);
                        continue;
                    }
                    const double* xrow = xc + std::int64_t(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        drow[ox] = (ix >= 0 && ix < w) ? static_cast<S>(xrow[ix]) : S(0);
                    }
                }
            }
    }
}

template <typename S>
void col2im_acc(const S* col, int cin_g, int h, int w, int k, int stride, int pad, int ho, int wo,
                double* dx) {
    int row = 0;
    for (int c = 0; c < cin_g; ++c) {
        double* xc = dx + std::int64_t(c) * h * w;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx, ++row) {
                const S* src = col + std::int64_t(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* xrow = xc + std::int64_t(iy) * w;
                    const S* srow = src + std::int64_t(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) xrow[ix] += static_cast<double>(srow[ox]);
                    }
                }
            }
    }
}

// C[M,N] += A[M,K] * B[K,N]. Register-blocked over four C rows with the
// N axis tiled so the C block stays in L1 across the K loop; every inner
// loop is a non-reduction FMA stream the compiler can vectorize.
template <typename S>
void gemm_acc(int m, int n, int k, const S* __restrict a, const S* __restrict b,
              S* __restrict c) {
    constexpr int NT = 512;
    for (int j0 = 0; j0 < n; j0 += NT) {
        const int jn = std::min(NT, n - j0);
        int i = 0;
        for (; i + 4 <= m; i += 4) {
            const S* __restrict a0 = a + std::int64_t(i) * k;
            const S* __restrict a1 = a0 + k;
            const S* __restrict a2 = a1 + k;
            const S* __restrict a3 = a2 + k;
            S* __restrict c0 = c + std::int64_t(i) * n + j0;
            S* __restrict c1 = c0 + n;
            S* __restrict c2 = c1 + n;
            S* __restrict c3 = c2 + n;
            int kk = 0;
            for (; kk + 2 <= k; kk += 2) {
                const S av00 = a0[kk], av01 = a0[kk + 1];
                const S av10 = a1[kk], av11 = a1[kk + 1];
                const S av20 = a2[kk], av21 = a2[kk + 1];
                const S av30 = a3[kk], av31 = a3[kk + 1];
                const S* __restrict b0 = b + std::int64_t(kk) * n + j0;
                const S* __restrict b1 = b0 + n;
                for (int j = 0; j < jn; ++j) {
                    const S bv0 = b0[j], bv1 = b1[j];
                    c0[j] += av00 * bv0 + av01 * bv1;
                    c1[j] += av10 * bv0 + av11 * bv1;
                    c2[j] += av20 * bv0 + av21 * bv1;
                    c3[j] += av30 * bv0 + av31 * bv1;
                }
            }
            for (; kk < k; ++kk) {
                const S av0 = a0[kk], av1 = a1[kk], av2 = a2[kk], av3 = a3[kk];
                const S* __restrict brow = b + std::int64_t(kk) * n + j0;
                for (int j = 0; j < jn; ++j) {
                    const S bv = brow[j];
                    c0[j] += av0 * bv;
                    c1[j] += av1 * bv;
                    c2[j] += av2 * bv;
                    c3[j] += av3 * bv;
                }
            }
        }
        for (; i < m; ++i) {
            const S* __restrict arow = a + std::int64_t(i) * k;
            S* __restrict crow = c + std::int64_t(i) * n + j0;
            for (int kk = 0; kk < k; ++kk) {
                const S av = arow[kk];
                const S* __restrict brow = b + std::int64_t(kk) * n + j0;
                for (int j = 0; j < jn; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// Transposed column buffer, [P][K] with P = ho*wo, K = cin_g*k*k. Rows are
// per output pixel, so the backward weight/input passes become plain gemms.
template <typename S>
void im2colT(const double* x, int cin_g, int h, int w, int k, int stride, int pad, int ho,
             int wo, S* colt) {
    const int kdim = cin_g * k * k;
    std::int64_t j = 0;
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++j) {
            S* row = colt + j * kdim;
            int idx = 0;
            for (int c = 0; c < cin_g; ++c) {
                const double* xc = x + std::int64_t(c) * h * w;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int kx = 0; kx < k; ++kx) row[idx++] = S(0);
                        continue;
                    }
                    const double* xrow = xc + std::int64_t(iy) * w;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        row[idx++] = (ix >= 0 && ix < w) ? static_cast<S>(xrow[ix]) : S(0);
                    }
                }
            }
        }
}

template <typename S>
void col2imT_acc(const S* colt, int cin_g, int h, int w, int k, int stride, int pad, int ho,
                 int wo, double* dx) {
    const int kdim = cin_g * k * k;
    std::int64_t j = 0;
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++j) {
            const S* row = colt + j * kdim;
            int idx = 0;
            for (int c = 0; c < cin_g; ++c) {
                double* xc = dx + std::int64_t(c) * h * w;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        idx += k;
                        continue;
                    }
                    double* xrow = xc + std::int64_t(iy) * w;
                    for (int kx = 0; kx < k; ++kx, ++idx) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) xrow[ix] += static_cast<double>(row[idx]);
                    }
                }
            }
        }
}

template <typename S>
std::vector<S>& scratch_buffer(int which) {
    thread_local std::vector<S> bufs[4];
    return bufs[which];
}

bool is_depthwise(const ConvDims& d) {
    return d.groups == d.cin && d.cout == d.cin && d.stride == 1;
}

// Direct depthwise convolution, one channel per group, stride 1. Skips the
// column buffers; accumulation runs along contiguous output rows so every
// tap is a vectorizable saxpy.
template <typename S>
void depthwise_forward(const ConvDims& d, const double* x, const double* wgt,
                       const double* bias, double* y) {
    const int k = d.k, h = d.h, w = d.w, ho = d.ho, wo = d.wo, pad = d.pad;
    std::vector<S> acc(static_cast<std::size_t>(wo));
    std::vector<S> xf(static_cast<std::size_t>(h) * w);
    std::vector<S> wf(static_cast<std::size_t>(k) * k);
    for (int nc = 0; nc < d.n * d.cin; ++nc) {
        const int c = nc % d.cin;
        const double* xp = x + std::int64_t(nc) * h * w;
        double* yp = y + std::int64_t(nc) * ho * wo;
        for (std::int64_t i = 0; i < std::int64_t(h) * w; ++i)
            xf[static_cast<std::size_t>(i)] = static_cast<S>(xp[i]);
        for (int i = 0; i < k * k; ++i)
            wf[static_cast<std::size_t>(i)] = static_cast<S>(wgt[std::int64_t(c) * k * k + i]);
        const S bv = static_cast<S>(bias[c]);
        for (int oy = 0; oy < ho; ++oy) {
            S* __restrict arow = acc.data();
            for (int ox = 0; ox < wo; ++ox) arow[ox] = bv;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy - pad + ky;
                if (iy < 0 || iy >= h) continue;
                const S* xrow = xf.data() + std::int64_t(iy) * w;
                for (int kx = 0; kx < k; ++kx) {
                    const S wv = wf[static_cast<std::size_t>(ky) * k +
                                    static_cast<std::size_t>(kx)];
                    const int off = kx - pad;
                    const int lo = std::max(0, -off);
                    const int hi = std::min(wo, w - off);
                    const S* __restrict src = xrow + off;
                    for (int ox = lo; ox < hi; ++ox) arow[ox] += wv * src[ox];
                }
            }
            double* __restrict yrow = yp + std::int64_t(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) yrow[ox] = static_cast<double>(arow[ox]);
        }
    }
}

template <typename S>
void depthwise_backward(const ConvDims& d, const double* x, const double* wgt,
                        const double* go, double* dx, double* dw, double* db) {
    const int k = d.k, h = d.h, w = d.w, ho = d.ho, wo = d.wo, pad = d.pad;
    const std::int64_t plane = std::int64_t(h) * w;
    std::vector<S> dwtmp(static_cast<std::size_t>(k) * k);
    std::vector<S> wf(static_cast<std::size_t>(k) * k);
    std::vector<S> gf(static_cast<std::size_t>(ho) * wo);
    std::vector<S> xf(dw ? static_cast<std::size_t>(plane) : 0);
    std::vector<S> dxf(dx ? static_cast<std::size_t>(plane) : 0);
    for (int nc = 0; nc < d.n * d.cin; ++nc) {
        const int c = nc % d.cin;
        const double* gp = go + std::int64_t(nc) * ho * wo;
        for (std::int64_t j = 0; j < std::int64_t(ho) * wo; ++j)
            gf[static_cast<std::size_t>(j)] = static_cast<S>(gp[j]);
        for (int i = 0; i < k * k; ++i)
            wf[static_cast<std::size_t>(i)] = static_cast<S>(wgt[std::int64_t(c) * k * k + i]);
        if (db) {
            S acc = S(0);
            for (std::int64_t j = 0; j < std::int64_t(ho) * wo; ++j)
                acc += gf[static_cast<std::size_t>(j)];
            db[c] += static_cast<double>(acc);
        }
        if (dx) {
            std::fill(dxf.begin(), dxf.end(), S(0));
            for (int oy = 0; oy < ho; ++oy) {
                const S* __restrict grow = gf.data() + std::int64_t(oy) * wo;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    S* dxrow = dxf.data() + std::int64_t(iy) * w;
                    for (int kx = 0; kx < k; ++kx) {
                        const S wv = wf[static_cast<std::size_t>(ky) * k +
                                        static_cast<std::size_t>(kx)];
                        const int off = kx - pad;
                        const int lo = std::max(0, -off);
                        const int hi = std::min(wo, w - off);
                        S* __restrict dst = dxrow + off;
                        for (int ox = lo; ox < hi; ++ox) dst[ox] += wv * grow[ox];
                    }
                }
            }
            double* __restrict dxp = dx + std::int64_t(nc) * plane;
            for (std::int64_t i = 0; i < plane; ++i)
                dxp[i] += static_cast<double>(dxf[static_cast<std::size_t>(i)]);
        }
        if (dw) {
            const double* xp = x + std::int64_t(nc) * plane;
            for (std::int64_t i = 0; i < plane; ++i)
                xf[static_cast<std::size_t>(i)] = static_cast<S>(xp[i]);
            std::fill(dwtmp.begin(), dwtmp.end(), S(0));
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const S g = gf[static_cast<std::size_t>(oy) * wo +
                                   static_cast<std::size_t>(ox)];
                    if (g == S(0)) continue;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        const int kx_lo = std::max(0, pad - ox);
                        const int kx_hi = std::min(k, w + pad - ox);
                        const S* __restrict xrow = xf.data() + std::int64_t(iy) * w + ox - pad;
                        S* __restrict drow = dwtmp.data() + std::int64_t(ky) * k;
                        for (int kx = kx_lo; kx < kx_hi; ++kx) drow[kx] += g * xrow[kx];
                    }
                }
            double* dwp = dw + std::int64_t(c) * k * k;
            for (int i = 0; i < k * k; ++i)
                dwp[i] += static_cast<double>(dwtmp[static_cast<std::size_t>(i)]);
        }
    }
}

template <typename S>
void conv_forward_kernel(const ConvDims& d, const double* x, const double* wgt,
                         const double* bias, double* y) {
    if (is_depthwise(d)) {
        depthwise_forward<S>(d, x, wgt, bias, y);
        return;
    }
    const std::int64_t p = std::int64_t(d.ho) * d.wo;
    const std::int64_t kdim = std::int64_t(d.cin_g) * d.k * d.k;
    auto& col = scratch_buffer<S>(0);
    auto& wmat = scratch_buffer<S>(1);
    auto& out = scratch_buffer<S>(2);
    col.resize(static_cast<std::size_t>(kdim * p));
    wmat.resize(static_cast<std::size_t>(std::int64_t(d.cout) * kdim));
    out.resize(static_cast<std::size_t>(std::int64_t(d.cout_g) * p));
    for (std::int64_t i = 0; i < d.cout * kdim; ++i)
        wmat[static_cast<std::size_t>(i)] = static_cast<S>(wgt[i]);
    for (int n = 0; n < d.n; ++n) {
        for (int g = 0; g < d.groups; ++g) {
            const double* xs = x + (std::int64_t(n) * d.cin + g * d.cin_g) * d.h * d.w;
            im2col<S>(xs, d.cin_g, d.h, d.w, d.k, d.stride, d.pad, d.ho, d.wo, col.data());
            std::fill(out.begin(), out.end(), S(0));
            gemm_acc<S>(d.cout_g, static_cast<int>(p), static_cast<int>(kdim),
                        wmat.data() + std::int64_t(g) * d.cout_g * kdim, col.data(),
                        out.data());
            double* ys = y + (std::int64_t(n) * d.cout + g * d.cout_g) * p;
            for (int c = 0; c < d.cout_g; ++c) {
                const S bv = static_cast<S>(bias[g * d.cout_g + c]);
                const S* orow = out.data() + std::int64_t(c) * p;
                double* yrow = ys + std::int64_t(c) * p;
                for (std::int64_t j = 0; j < p; ++j)
                    yrow[j] = static_cast<double>(orow[j] + bv);
            }
        }
    }
}

// Backward passes as blocked gemms.
//   dW[cout_g,K] += dY[cout_g,P] * colT[P,K]
// For stride 1 the input gradient is itself a convolution of dY with the
// flipped, channel-transposed weights (full correlation, pad k-1-pad), so it
// runs through im2col + gemm with sequential writes. Strided convolutions
// fall back to the scatter (col2im) route.
template <typename S>
void conv_backward_kernel(const ConvDims& d, const double* x, const double* wgt,
                          const double* go, double* dx, double* dw, double* db) {
    if (is_depthwise(d)) {
        depthwise_backward<S>(d, x, wgt, go, dx, dw, db);
        return;
    }
    const std::int64_t p = std::int64_t(d.ho) * d.wo;
    const std::int64_t plane = std::int64_t(d.h) * d.w;
    const std::int64_t kdim = std::int64_t(d.cin_g) * d.k * d.k;
    const std::int64_t kdim_t = std::int64_t(d.cout_g) * d.k * d.k;
    auto& colt = scratch_buffer<S>(0);
    auto& dyv = scratch_buffer<S>(1);
    auto& small = scratch_buffer<S>(2);
    auto& wmat = scratch_buffer<S>(3);
    colt.resize(static_cast<std::size_t>(std::max(kdim * p, kdim_t * plane)));
    dyv.resize(static_cast<std::size_t>(std::int64_t(d.cout_g) * p));
    small.resize(static_cast<std::size_t>(
        std::max({std::int64_t(d.cout_g) * kdim, kdim * p, std::int64_t(d.cin_g) * plane})));
    wmat.resize(static_cast<std::size_t>(std::int64_t(d.cout) * kdim));
    for (std::int64_t i = 0; i < d.cout * kdim; ++i)
        wmat[static_cast<std::size_t>(i)] = static_cast<S>(wgt[i]);

    // flipped, channel-transposed weights per group: [cin_g][cout_g*k*k]
    std::vector<S> wflip;
    const bool dx_direct = dx && d.stride == 1;
    if (dx_direct) {
        wflip.resize(static_cast<std::size_t>(d.groups * d.cin_g * kdim_t));
        for (int g = 0; g < d.groups; ++g)
            for (int co = 0; co < d.cout_g; ++co)
                for (int ci = 0; ci < d.cin_g; ++ci)
                    for (int ky = 0; ky < d.k; ++ky)
                        for (int kx = 0; kx < d.k; ++kx)
                            wflip[static_cast<std::size_t>(
                                ((std::int64_t(g) * d.cin_g + ci) * d.cout_g + co) * d.k * d.k +
                                (d.k - 1 - ky) * d.k + (d.k - 1 - kx))] =
                                static_cast<S>(
                                    wgt[((std::int64_t(g) * d.cout_g + co) * d.cin_g + ci) *
                                            d.k * d.k +
                                        std::int64_t(ky) * d.k + kx]);
    }
    std::vector<S> dytv;
    if (dx && !dx_direct) dytv.resize(static_cast<std::size_t>(std::int64_t(d.cout_g) * p));

    for (int n = 0; n < d.n; ++n) {
        for (int g = 0; g < d.groups; ++g) {
            const double* gs = go + (std::int64_t(n) * d.cout + g * d.cout_g) * p;
            if (db || dw) {
                for (std::int64_t i = 0; i < d.cout_g * p; ++i)
                    dyv[static_cast<std::size_t>(i)] = static_cast<S>(gs[i]);
            }
            if (db) {
                for (int c = 0; c < d.cout_g; ++c) {
                    S acc = S(0);
                    const S* row = dyv.data() + std::int64_t(c) * p;
                    for (std::int64_t j = 0; j < p; ++j) acc += row[j];
                    db[g * d.cout_g + c] += static_cast<double>(acc);
                }
            }
            if (dw) {
                const double* xs = x + (std::int64_t(n) * d.cin + g * d.cin_g) * plane;
                im2colT<S>(xs, d.cin_g, d.h, d.w, d.k, d.stride, d.pad, d.ho, d.wo,
                           colt.data());
                S* dwtmp = small.data();
                std::fill(dwtmp, dwtmp + d.cout_g * kdim, S(0));
                gemm_acc<S>(d.cout_g, static_cast<int>(kdim), static_cast<int>(p), dyv.data(),
                            colt.data(), dwtmp);
                double* dws = dw + std::int64_t(g) * d.cout_g * kdim;
                for (std::int64_t i = 0; i < d.cout_g * kdim; ++i)
                    dws[i] += static_cast<double>(dwtmp[i]);
            }
            if (dx_direct) {
                im2col<S>(gs, d.cout_g, d.ho, d.wo, d.k, 1, d.k - 1 - d.pad, d.h, d.w,
                          colt.data());
                S* dxtmp = small.data();
                std::fill(dxtmp, dxtmp + d.cin_g * plane, S(0));
                gemm_acc<S>(d.cin_g, static_cast<int>(plane), static_cast<int>(kdim_t),
                            wflip.data() + std::int64_t(g) * d.cin_g * kdim_t, colt.data(),
                            dxtmp);
                double* dxs = dx + (std::int64_t(n) * d.cin + g * d.cin_g) * plane;
                for (std::int64_t i = 0; i < d.cin_g * plane; ++i)
                    dxs[i] += static_cast<double>(dxtmp[i]);
            } else if (dx) {
                if (!(db || dw))
                    for (std::int64_t i = 0; i < d.cout_g * p; ++i)
                        dyv[static_cast<std::size_t>(i)] = static_cast<S>(gs[i]);
                for (int c = 0; c < d.cout_g; ++c)
                    for (std::int64_t j = 0; j < p; ++j)
                        dytv[static_cast<std::size_t>(j * d.cout_g + c)] =
                            dyv[static_cast<std::size_t>(std::int64_t(c) * p + j)];
                S* dcolt = small.data();
                std::fill(dcolt, dcolt + kdim * p, S(0));
                gemm_acc<S>(static_cast<int>(p), static_cast<int>(kdim), d.cout_g,
                            dytv.data(), wmat.data() + std::int64_t(g) * d.cout_g * kdim,
                            dcolt);
                double* dxs = dx + (std::int64_t(n) * d.cin + g * d.cin_g) * plane;
                col2imT_acc<S>(dcolt, d.cin_g, d.h, d.w, d.k, d.stride, d.pad, d.ho, d.wo,
                               dxs);
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad,
              int groups) {
    const ConvDims d = conv_check(x, weight, bias, stride, pad, groups);
    Tensor out = make_op_output({d.n, d.cout, d.ho, d.wo});
    dispatch([&]<typename S>() {
        conv_forward_kernel<S>(d, x.data(), weight.data(), bias.data(), out.data());
    });
    if (recording_wanted({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor xv = x, wv = weight, bv = bias, ov = out;
        Graph::active()->record({out}, [xv, wv, bv, ov, d]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.requires_grad() ? xv.ensure_grad() : nullptr;
            double* dw = wv.requires_grad() ? wv.ensure_grad() : nullptr;
            double* db = bv.requires_grad() ? bv.ensure_grad() : nullptr;
            dispatch([&]<typename S>() {
                conv_backward_kernel<S>(d, xv.data(), wv.data(), go, dx, dw, db);
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1)
        throw ShapeError("linear: expects x rank 2, weight rank 2, bias rank 1");
    const int n = x.extent(0), din = x.extent(1);
    const int dout = weight.extent(0);
    if (weight.extent(1) != din || bias.extent(0) != dout)
        throw ShapeError("linear: shape mismatch x " + shape_str(x.shape()) + " weight " +
                         shape_str(weight.shape()));
    Tensor out = make_op_output({n, dout});
    dispatch([&]<typename S>() {
        const double* xp = x.data();
        const double* wp = weight.data();
        const double* bp = bias.data();
        double* yp = out.data();
        for (int i = 0; i < n; ++i)
            for (int o = 0; o < dout; ++o) {
                S acc = static_cast<S>(bp[o]);
                const double* xrow = xp + std::int64_t(i) * din;
                const double* wrow = wp + std::int64_t(o) * din;
                for (int k = 0; k < din; ++k)
                    acc += static_cast<S>(xrow[k]) * static_cast<S>(wrow[k]);
                yp[std::int64_t(i) * dout + o] = static_cast<double>(acc);
            }
    });
    if (recording_wanted({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor xv = x, wv = weight, bv = bias, ov = out;
        Graph::active()->record({out}, [xv, wv, bv, ov, n, din, dout]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            dispatch([&]<typename S>() {
                if (xv.requires_grad()) {
                    double* dx = xv.ensure_grad();
                    for (int i = 0; i < n; ++i)
                        for (int k = 0; k < din; ++k) {
                            S acc = S(0);
                            for (int o = 0; o < dout; ++o)
                                acc += static_cast<S>(go[std::int64_t(i) * dout + o]) *
                                       static_cast<S>(wv.data()[std::int64_t(o) * din + k]);
                            dx[std::int64_t(i) * din + k] += static_cast<double>(acc);
                        }
                }
                if (wv.requires_grad()) {
                    double* dw = wv.ensure_grad();
                    for (int o = 0; o < dout; ++o)
                        for (int k = 0; k < din; ++k) {
                            S acc = S(0);
                            for (int i = 0; i < n; ++i)
                                acc += static_cast<S>(go[std::int64_t(i) * dout + o]) *
                                       static_cast<S>(xv.data()[std::int64_t(i) * din + k]);
                            dw[std::int64_t(o) * din + k] += static_cast<double>(acc);
                        }
                }
                if (bv.requires_grad()) {
                    double* db = bv.ensure_grad();
                    for (int o = 0; o < dout; ++o) {
                        S acc = S(0);
                        for (int i = 0; i < n; ++i)
                            acc += static_cast<S>(go[std::int64_t(i) * dout + o]);
                        db[o] += static_cast<double>(acc);
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: operand must be rank 4");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::int64_t plane = std::int64_t(h) * w;
    Tensor out = make_op_output({n, c, 1, 1});
    dispatch([&]<typename S>() {
        const S inv = S(1) / static_cast<S>(plane);
        for (int i = 0; i < n * c; ++i) {
            const double* xp = x.data() + i * plane;
            S acc = S(0);
            for (std::int64_t j = 0; j < plane; ++j) acc += static_cast<S>(xp[j]);
            out.data()[i] = static_cast<double>(acc * inv);
        }
    });
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n, c, plane]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            dispatch([&]<typename S>() {
                const S inv = S(1) / static_cast<S>(plane);
                for (int i = 0; i < n * c; ++i) {
                    const S gv = static_cast<S>(go[i]) * inv;
                    double* drow = dx + i * plane;
                    for (std::int64_t j = 0; j < plane; ++j)
                        drow[j] += static_cast<double>(gv);
                }
            });
        });
    }
    return out;
}

Tensor bilinear_down2(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("bilinear_down2: operand must be rank 4");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("bilinear_down2: spatial extents must be even, got " +
                         shape_str(x.shape()));
    const int ho = h / 2, wo = w / 2;
    Tensor out = make_op_output({n, c, ho, wo});
    dispatch([&]<typename S>() {
        for (int i = 0; i < n * c; ++i) {
            const double* xp = x.data() + std::int64_t(i) * h * w;
            double* yp = out.data() + std::int64_t(i) * ho * wo;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const double* p = xp + std::int64_t(2 * oy) * w + 2 * ox;
                    const S s = (static_cast<S>(p[0]) + static_cast<S>(p[1]) +
                                 static_cast<S>(p[w]) + static_cast<S>(p[w + 1])) *
                                S(0.25);
                    yp[std::int64_t(oy) * wo + ox] = static_cast<double>(s);
                }
        }
    });
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n, c, h, w, ho, wo]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            dispatch([&]<typename S>() {
                for (int i = 0; i < n * c; ++i) {
                    const double* gp = go + std::int64_t(i) * ho * wo;
                    double* dp = dx + std::int64_t(i) * h * w;
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox) {
                            const double gv = static_cast<double>(
                                static_cast<S>(gp[std::int64_t(oy) * wo + ox]) * S(0.25));
                            double* p = dp + std::int64_t(2 * oy) * w + 2 * ox;
                            p[0] += gv;
                            p[1] += gv;
                            p[w] += gv;
                            p[w + 1] += gv;
                        }
                }
            });
        });
    }
    return out;
}

Tensor bilinear_down4(const Tensor& x) { return bilinear_down2(bilinear_down2(x)); }

namespace {

struct LerpAxis {
    int i0, i1;
    double f;  // weight of i1
};

LerpAxis lerp_axis(int o, int in_extent, int out_extent) {
    const double s = (o + 0.5) * static_cast<double>(in_extent) / out_extent - 0.5;
    const int base = static_cast<int>(std::floor(s));
    LerpAxis a;
    a.f = s - base;
    a.i0 = std::clamp(base, 0, in_extent - 1);
    a.i1 = std::clamp(base + 1, 0, in_extent - 1);
    return a;
}

}  // namespace

Tensor bilinear_up_to(const Tensor& x, int h_out, int w_out) {
    if (x.rank() != 4) throw ShapeError("bilinear_up_to: operand must be rank 4");
    if (h_out < 1 || w_out < 1) throw ShapeError("bilinear_up_to: target extents must be >= 1");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor out = make_op_output({n, c, h_out, w_out});
    std::vector<LerpAxis> ys(static_cast<std::size_t>(h_out)), xs(static_cast<std::size_t>(w_out));
    for (int oy = 0; oy < h_out; ++oy) ys[static_cast<std::size_t>(oy)] = lerp_axis(oy, h, h_out);
    for (int ox = 0; ox < w_out; ++ox) xs[static_cast<std::size_t>(ox)] = lerp_axis(ox, w, w_out);
    dispatch([&]<typename S>() {
        for (int i = 0; i < n * c; ++i) {
            const double* xp = x.data() + std::int64_t(i) * h * w;
            double* yp = out.data() + std::int64_t(i) * h_out * w_out;
            for (int oy = 0; oy < h_out; ++oy) {
                const LerpAxis& ay = ys[static_cast<std::size_t>(oy)];
                const S fy = static_cast<S>(ay.f);
                for (int ox = 0; ox < w_out; ++ox) {
                    const LerpAxis& ax = xs[static_cast<std::size_t>(ox)];
                    const S fx = static_cast<S>(ax.f);
                    const S v00 = static_cast<S>(xp[std::int64_t(ay.i0) * w + ax.i0]);
                    const S v01 = static_cast<S>(xp[std::int64_t(ay.i0) * w + ax.i1]);
                    const S v10 = static_cast<S>(xp[std::int64_t(ay.i1) * w + ax.i0]);
                    const S v11 = static_cast<S>(xp[std::int64_t(ay.i1) * w + ax.i1]);
                    const S v = (S(1) - fy) * ((S(1) - fx) * v00 + fx * v01) +
                                fy * ((S(1) - fx) * v10 + fx * v11);
                    yp[std::int64_t(oy) * w_out + ox] = static_cast<double>(v);
                }
            }
        }
    });
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n, c, h, w, h_out, w_out, ys, xs]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            dispatch([&]<typename S>() {
                for (int i = 0; i < n * c; ++i) {
                    const double* gp = go + std::int64_t(i) * h_out * w_out;
                    double* dp = dx + std::int64_t(i) * h * w;
                    for (int oy = 0; oy < h_out; ++oy) {
                        const LerpAxis& ay = ys[static_cast<std::size_t>(oy)];
                        const S fy = static_cast<S>(ay.f);
                        for (int ox = 0; ox < w_out; ++ox) {
                            const LerpAxis& ax = xs[static_cast<std::size_t>(ox)];
                            const S fx = static_cast<S>(ax.f);
                            const S g = static_cast<S>(gp[std::int64_t(oy) * w_out + ox]);
                            dp[std::int64_t(ay.i0) * w + ax.i0] +=
                                static_cast<double>(g * (S(1) - fy) * (S(1) - fx));
                            dp[std::int64_t(ay.i0) * w + ax.i1] +=
                                static_cast<double>(g * (S(1) - fy) * fx);
                            dp[std::int64_t(ay.i1) * w + ax.i0] +=
                                static_cast<double>(g * fy * (S(1) - fx));
                            dp[std::int64_t(ay.i1) * w + ax.i1] +=
                                static_cast<double>(g * fy * fx);
                        }
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
    Tensor out = make_op_output({1});
    const std::int64_t n = x.numel();
    dispatch([&]<typename S>() {
        S acc = S(0);
        const double* xp = x.data();
        for (std::int64_t i = 0; i < n; ++i) acc += static_cast<S>(xp[i]);
        out.data()[0] = static_cast<double>(acc);
    });
    if (recording_wanted({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Graph::active()->record({out}, [xv, ov, n]() mutable {
            const double* go = ov.grad_data();
            if (!go) return;
            double* dx = xv.ensure_grad();
            const double g = go[0];
            for (std::int64_t i = 0; i < n; ++i) dx[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    return affine(sum_all(x), 1.0 / static_cast<double>(x.numel()), 0.0);
}

}  // namespace ubn
