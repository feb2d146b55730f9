#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ubn/common.hpp"

namespace ubn {

/// Extents, rank 1..4. Rank-4 tensors use the canonical N,C,H,W layout.
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Allocator that leaves doubles uninitialized on container growth; op
/// outputs are fully overwritten by their kernels, so zeroing them first is
/// pure overhead. Buffers that rely on zeros (gradients, factory zeros) are
/// filled explicitly.
template <typename T>
struct UninitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = UninitAllocator<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) > 0) ::new (static_cast<void*>(p)) U(args...);
    }
};

using DataBuffer = std::vector<double, UninitAllocator<double>>;

struct TensorImpl {
    Shape shape;
    DataBuffer data;
    DataBuffer grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;  // false for op outputs
};

/// Dense tensor handle with shared storage. Copies alias the same buffer.
/// Storage is always double; kernels do their arithmetic at the global
/// compute precision (see Precision), so f32 mode produces genuine
/// float-rounded results stored losslessly in the double buffer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor constant(const Shape& shape, double value, bool requires_grad = false);
    static Tensor uniform(const Shape& shape, double lo, double hi, std::uint64_t seed,
                          bool requires_grad = false);
    static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng,
                          bool requires_grad = false);
    /// Draws N(0, 2/fan_in).
    static Tensor he_normal(const Shape& shape, int fan_in, std::uint64_t seed,
                            bool requires_grad = false);
    static Tensor he_normal(const Shape& shape, int fan_in, Rng& rng,
                            bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }
    bool is_leaf() const { return impl_->leaf; }

    bool has_grad() const { return !impl_->grad.empty(); }
    /// Allocates a zero gradient buffer on first use.
    double* ensure_grad();
    const double* grad_data() const { return has_grad() ? impl_->grad.data() : nullptr; }
    void zero_grad();

    /// Value of a single-element tensor.
    double item() const;

    Tensor clone() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    friend Tensor make_op_output(const Shape& shape);
    std::shared_ptr<TensorImpl> impl_;
};

/// Creates a non-leaf tensor for op results (zero-filled).
Tensor make_op_output(const Shape& shape);

/// Reverse-mode tape. Nodes are appended in execution order; backward()
/// replays them exactly once in reverse. Non-leaf gradients are reset at
/// the start of each backward pass, leaf gradients accumulate across calls.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// The graph ops currently record onto, or nullptr (inference mode).
    static Graph* active();

    /// Appends a node. `outputs` are the tensors this node produced; their
    /// gradients are cleared when the next backward pass starts.
    void record(std::vector<Tensor> outputs, std::function<void()> vjp);

    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }

private:
    friend class Recording;
    struct Node {
        std::vector<std::shared_ptr<TensorImpl>> outputs;
        std::function<void()> vjp;
    };
    std::vector<Node> nodes_;
};

/// Binds a Graph as the active recording target for the current scope.
class Recording {
public:
    explicit Recording(Graph& g);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

private:
    Graph* prev_;
};

/// True when a graph is active and any input requires a gradient.
bool recording_wanted(std::initializer_list<const Tensor*> inputs);

// ---- elementwise ----
// For add/sub/mul/div the second operand may broadcast over the first:
// ranks must match and every extent of b equals a's or is 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs_val(const Tensor& x);
/// scale * x + shift, elementwise with scalar coefficients.
Tensor affine(const Tensor& x, double scale, double shift);

// ---- structural ----
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int c0, int c1);
/// Spatial crop of a rank-4 tensor: rows [y0,y1), cols [x0,x1).
Tensor crop_spatial(const Tensor& x, int y0, int y1, int x0, int x1);
Tensor reshape(const Tensor& x, const Shape& shape);

// ---- neural primitives ----
/// Cross-correlation, zero padding, floor output extents
/// H' = (H + 2*pad - k) / stride + 1. Depthwise = groups == Cin.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad,
              int groups = 1);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor global_avg_pool(const Tensor& x);

/// Disjoint 2x2 block mean (bilinear at half-pixel centers for factor 2).
Tensor bilinear_down2(const Tensor& x);
/// 4x4 block mean, computed as two factor-2 passes.
Tensor bilinear_down4(const Tensor& x);
/// Bilinear interpolation with half-pixel-center sampling to (h_out, w_out).
Tensor bilinear_up_to(const Tensor& x, int h_out, int w_out);

// ---- reductions ----
Tensor sum_all(const Tensor& x);   // shape {1}
Tensor mean_all(const Tensor& x);  // shape {1}

}  // namespace ubn
