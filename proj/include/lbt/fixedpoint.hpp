// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "error.hpp"

namespace lbt {

// Exponent assigned to a tensor whose contents are all zero.
inline constexpr int kDefaultZeroExponent = -20;

/// Dynamic fixed-point format: a signed `bit_width`-bit integer grid with
/// step 2^exponent. Codes live in [-2^(b-1), 2^(b-1) - 1].
struct FixedPointFormat {
    int bit_width = 8;
    int exponent = 0;

    static constexpr int kMinBits = 2;
    static constexpr int kMaxBits = 32;

    constexpr std::int64_t max_code() const { return (std::int64_t{1} << (bit_width - 1)) - 1; }
    constexpr std::int64_t min_code() const { return -(std::int64_t{1} << (bit_width - 1)); }
    double step() const { return std::ldexp(1.0, exponent); }

    friend constexpr bool operator==(const FixedPointFormat&, const FixedPointFormat&) = default;
};

inline void check_bit_width(int bit_width) {
    if (bit_width < FixedPointFormat::kMinBits || bit_width > FixedPointFormat::kMaxBits)
        throw Error("bit width " + std::to_string(bit_width) + " outside 2..32");
}

inline void check_format(const FixedPointFormat& f) {
    check_bit_width(f.bit_width);
    // keep 2^exponent and the largest code finite and normal in double
    if (f.exponent < -1000 || f.exponent > 980)
        throw Error("exponent " + std::to_string(f.exponent) + " out of range");
}

struct QValue {
    std::int64_t code = 0;
    FixedPointFormat format;

    friend constexpr bool operator==(const QValue&, const QValue&) = default;
};

/// Smallest exponent e with max|v| <= max_code * 2^e. Returns `zero_exponent`
/// when every value is zero.
inline int choose_exponent_for_max(double max_abs, int bit_width, int zero_exponent = kDefaultZeroExponent) {
    check_bit_width(bit_width);
    if (!std::isfinite(max_abs)) throw Error("non-finite input");
    if (max_abs == 0.0) return zero_exponent;
    const double max_code = std::ldexp(1.0, bit_width - 1) - 1.0;
    int exp2 = 0;
    std::frexp(max_abs / max_code, &exp2);
    int e = exp2;
    // frexp gives a close guess; settle it with exact comparisons
    while (max_abs > std::ldexp(max_code, e)) ++e;
    while (max_abs <= std::ldexp(max_code, e - 1)) --e;
    return e;
}

inline int choose_exponent(std::span<const double> values, int bit_width, int zero_exponent = kDefaultZeroExponent) {
    check_bit_width(bit_width);
    if (values.empty()) throw Error("empty tensor has no scale");
    double max_abs = 0.0;
    for (double v : values) {
        if (!std::isfinite(v)) throw Error("non-finite input");
        max_abs = std::max(max_abs, std::fabs(v));
    }
    return choose_exponent_for_max(max_abs, bit_width, zero_exponent);
}

/// Round-half-to-even onto the grid of `f`, saturating at the extreme codes.
inline std::int64_t quantize_code(double x, const FixedPointFormat& f) {
    if (!std::isfinite(x)) throw Error("non-finite input");
    const double scaled = std::ldexp(x, -f.exponent);
    const auto hi = static_cast<double>(f.max_code());
    const auto lo = static_cast<double>(f.min_code());
    if (scaled >= hi) return f.max_code();
    if (scaled <= lo) return f.min_code();
    // default FE_TONEAREST rounding: ties go to even
    return static_cast<std::int64_t>(std::nearbyint(scaled));
}

inline QValue quantize(double x, const FixedPointFormat& f) {
    check_format(f);
    return {quantize_code(x, f), f};
}

inline double dequantize_code(std::int64_t code, int exponent) {
    return std::ldexp(static_cast<double>(code), exponent);
}

inline double dequantize(const QValue& q) { return dequantize_code(q.code, q.format.exponent); }

/// Bits available to a parameter update when an m-bit parameter is paired with
/// an n-bit accumulator whose top k bits overlap the parameter's bottom bits.
inline int effective_update_bits(int m, int n, int k) {
    if (m < 2 || n < 2) throw Error("effective_update_bits: m and n must be >= 2");
    if (k < 0 || k > std::min(m, n)) throw Error("effective_update_bits: overlap k outside 0..min(m, n)");
    return m + n - 2 - k;
}

} // namespace lbt
