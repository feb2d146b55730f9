#include "ubn/common.hpp"

#include <cmath>

#if defined(__SSE__) || defined(__x86_64__)
#include <immintrin.h>
#endif

namespace ubn {

namespace {
Precision g_precision = Precision::f32;

// Backpropagated values routinely underflow the f32 normal range; denormal
// arithmetic stalls the FPU by two orders of magnitude. Flush them to zero,
// which is deterministic and far below every tolerance in use.
const bool g_ftz_enabled = [] {
#if defined(__SSE__) || defined(__x86_64__)
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
    return true;
}();
}

Precision compute_precision() { return g_precision; }

void set_compute_precision(Precision p) { g_precision = p; }

}  // namespace ubn
