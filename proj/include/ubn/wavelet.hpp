#pragma once

#include "ubn/tensor.hpp"

namespace ubn {

/// One-level 2D Haar decomposition, orthonormal convention.
/// hf stacks the detail bands channel-wise as [LH, HL, HH], C channels each.
struct DwtBands {
    Tensor lf;  // [N,C,H/2,W/2]
    Tensor hf;  // [N,3C,H/2,W/2]
};

/// Per 2x2 block [a b; c d]:
///   LL=(a+b+c+d)/2, LH=(a-b+c-d)/2, HL=(a+b-c-d)/2, HH=(a-b-c+d)/2.
DwtBands dwt_haar(const Tensor& x);

/// Exact linear inverse of dwt_haar.
Tensor idwt_haar(const DwtBands& bands);

}  // namespace ubn
