#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ubn {

/// Invalid tensor extents or incompatible operand shapes.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// An API contract was violated (bad argument, missing gradient, ...).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File IO or file-format failure.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Global compute precision. f32 is the training default; f64 exists for
/// gradient verification against finite differences. The setting selects the
/// arithmetic width of every kernel; tensor storage is unaffected.
enum class Precision { f32, f64 };

Precision compute_precision();
void set_compute_precision(Precision p);

/// Canonicalizes a value entering tensor storage: in f32 mode every stored
/// scalar is a float value held in a double, so identity paths (add zero,
/// multiply by one) reproduce their input bit-exactly.
inline double store_rounded(double v) {
    return compute_precision() == Precision::f32 ? static_cast<double>(static_cast<float>(v))
                                                 : v;
}

/// RAII precision override for tests.
class PrecisionScope {
public:
    explicit PrecisionScope(Precision p) : prev_(compute_precision()) {
        set_compute_precision(p);
    }
    ~PrecisionScope() { set_compute_precision(prev_); }
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
    Precision prev_;
};

/// Deterministic random stream. mt19937_64 is fully specified by the
/// standard, and the uniform/normal constructions below avoid
/// std::*_distribution, whose output may differ between standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller; pairs are cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::below: n must be positive");
        return next_u64() % n;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ubn
