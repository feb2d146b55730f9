#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ubn/tensor.hpp"

namespace testutil {

inline double max_abs_diff(const ubn::Tensor& a, const ubn::Tensor& b) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
    return worst;
}

inline double max_abs_diff(const ubn::Tensor& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::fabs(a.data()[i] - b[static_cast<std::size_t>(i)]));
    return worst;
}

inline bool bit_identical(const ubn::Tensor& a, const ubn::Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace testutil
