// SPDX-License-Identifier: Apache-2.0

#pragma once

// Integer tensor ops. Every op accumulates exactly in a wide integer and rounds
// once, at its output, onto a freshly chosen dynamic fixed-point format.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "fixedpoint.hpp"
#include "kernels.hpp"
#include "tensor.hpp"

namespace lbt {

using int128 = __int128;

namespace detail {

inline std::uint64_t abs_u64(std::int64_t v) {
    return v < 0 ? ~static_cast<std::uint64_t>(v) + 1 : static_cast<std::uint64_t>(v);
}

inline unsigned __int128 abs_u128(int128 v) {
    return v < 0 ? ~static_cast<unsigned __int128>(v) + 1 : static_cast<unsigned __int128>(v);
}

inline int bit_length(unsigned __int128 v) {
    int n = 0;
    while (v) {
        ++n;
        v >>= 1;
    }
    return n;
}

// max_abs <= max_code * 2^s, evaluated exactly
inline bool fits_after_shift(unsigned __int128 max_abs, std::int64_t max_code, int s) {
    const auto mc = static_cast<unsigned __int128>(max_code);
    if (s >= 0) return s >= 96 || max_abs <= (mc << s);
    if (-s >= 96) return false;
    if (bit_length(max_abs) - s > 127) return false;
    return (max_abs << -s) <= mc;
}

/// Smallest shift s with max_abs <= max_code * 2^s.
inline int smallest_shift(unsigned __int128 max_abs, int bit_width) {
    const std::int64_t max_code = (std::int64_t{1} << (bit_width - 1)) - 1;
    int s = bit_length(max_abs) - (bit_width - 1);
    while (!fits_after_shift(max_abs, max_code, s)) ++s;
    while (fits_after_shift(max_abs, max_code, s - 1)) --s;
    return s;
}

/// round(v / 2^s) with ties to even; s <= 0 shifts left exactly.
inline int128 round_shift(int128 v, int s) {
    if (s <= 0) return v << -s;
    if (s >= 126) return 0;
    int128 floor = v >> s;
    const int128 rem = v - (floor << s);
    const int128 half = int128{1} << (s - 1);
    if (rem > half || (rem == half && (floor & 1))) ++floor;
    return floor;
}

inline std::int64_t round_shift64(std::int64_t v, int s) {
    if (s <= 0) return v << -s;
    if (s >= 63) return 0;
    std::int64_t floor = v >> s;
    const std::int64_t rem = v - (floor << s);
    const std::int64_t half = std::int64_t{1} << (s - 1);
    if (rem > half || (rem == half && (floor & 1))) ++floor;
    return floor;
}

} // namespace detail

/// Requantize exact integers (value = v * 2^exponent) onto `out_bits` with a
/// fresh exponent from the max magnitude.
template <class Int>
QTensor requantize_values(const Shape& shape, std::span<const Int> values, int exponent, int out_bits,
                          int zero_exponent = kDefaultZeroExponent) {
    check_bit_width(out_bits);
    unsigned __int128 max_abs = 0;
    for (Int v : values) max_abs = std::max(max_abs, detail::abs_u128(static_cast<int128>(v)));
    if (max_abs == 0) return QTensor(shape, {out_bits, zero_exponent});

    const int shift = detail::smallest_shift(max_abs, out_bits);
    FixedPointFormat f{out_bits, exponent + shift};
    check_format(f);
    QTensor out(shape, f);
    if (max_abs < (static_cast<unsigned __int128>(1) << 62) && shift >= 0) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::int64_t r = detail::round_shift64(static_cast<std::int64_t>(values[i]), shift);
            out.codes[i] = static_cast<std::int32_t>(std::clamp<std::int64_t>(r, f.min_code(), f.max_code()));
        }
        return out;
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        const int128 r = detail::round_shift(static_cast<int128>(values[i]), shift);
        out.codes[i] = static_cast<std::int32_t>(std::clamp<int128>(r, f.min_code(), f.max_code()));
    }
    return out;
}

inline QTensor requantize(const WideTensor& w, int out_bits, int zero_exponent = kDefaultZeroExponent) {
    return requantize_values<std::int64_t>(w.shape, w.acc, w.exponent, out_bits, zero_exponent);
}

/// Re-express an existing tensor on a new bit width (fresh exponent).
inline QTensor requantize(const QTensor& q, int out_bits, int zero_exponent = kDefaultZeroExponent) {
    return requantize_values<std::int32_t>(q.shape, q.codes, q.format.exponent, out_bits, zero_exponent);
}

inline std::uint64_t max_abs_code(const QTensor& q) {
    std::uint64_t m = 0;
    for (auto c : q.codes) m = std::max(m, detail::abs_u64(c));
    return m;
}

namespace detail {

enum class AccWidth { i32, i64 };

// Picks the narrowest accumulator that provably holds `terms` products.
inline AccWidth accumulator_for(std::uint64_t max_a, std::uint64_t max_b, std::uint64_t terms, const char* op) {
    const unsigned __int128 bound = static_cast<unsigned __int128>(max_a) * max_b * std::max<std::uint64_t>(terms, 1);
    if (bound <= static_cast<unsigned __int128>(std::numeric_limits<std::int32_t>::max())) return AccWidth::i32;
    if (bound <= static_cast<unsigned __int128>(std::numeric_limits<std::int64_t>::max())) return AccWidth::i64;
    throw Error(std::string(op) + ": accumulator overflow (product bound exceeds 64-bit range)");
}

/// c = a (M x K) * b (K x N) exactly.
inline void gemm_exact(std::span<const std::int32_t> a, std::span<const std::int32_t> b, std::int64_t* c, std::size_t m, std::size_t n,
                       std::size_t k, std::uint64_t max_a, std::uint64_t max_b, const char* op) {
    if (accumulator_for(max_a, max_b, k, op) == AccWidth::i32)
        kernels::gemm_nn<std::int32_t>(a.data(), b.data(), c, m, n, k);
    else
        kernels::gemm_nn<std::int64_t>(a.data(), b.data(), c, m, n, k);
}

inline std::uint64_t max_abs(std::span<const std::int32_t> v) {
    std::uint64_t m = 0;
    for (auto c : v) m = std::max(m, abs_u64(c));
    return m;
}

} // namespace detail

// ---------------------------------------------------------------- matmul

inline QTensor transpose(const QTensor& q) {
    if (q.shape.size() != 2) throw Error("transpose needs a 2-D tensor");
    QTensor out({q.shape[1], q.shape[0]}, q.format);
    out.codes = kernels::transpose<std::int32_t>(q.codes, q.shape[0], q.shape[1]);
    return out;
}

/// Exact a (M x K) * b (K x N) before requantization; exponent e_a + e_b.
inline WideTensor qt_matmul_wide(const QTensor& a, const QTensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw Error("matmul: dimension mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    WideTensor out({m, n}, a.format.exponent + b.format.exponent);
    detail::gemm_exact(a.codes, b.codes, out.acc.data(), m, n, k, max_abs_code(a), max_abs_code(b), "matmul");
    return out;
}

/// Exact a (M x K) * b^T where b is N x K.
inline WideTensor qt_matmul_nt_wide(const QTensor& a, const QTensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1])
        throw Error("matmul: dimension mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
    return qt_matmul_wide(a, transpose(b));
}

inline QTensor qt_matmul(const QTensor& a, const QTensor& b, int out_bits) {
    return requantize(qt_matmul_wide(a, b), out_bits);
}

// ---------------------------------------------------------------- conv

inline kernels::ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t pad) {
    if (input.size() != 4 || kernel.size() != 4)
        throw Error("conv2d: expected NCHW input and OIHW kernel, got " + shape_str(input) + " and " + shape_str(kernel));
    if (input[1] != kernel[1])
        throw Error("conv2d: input has " + std::to_string(input[1]) + " channels, kernel expects " + std::to_string(kernel[1]));
    kernels::ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], stride, pad};
    g.check();
    return g;
}

/// Exact cross-correlation, NCHW output, exponent e_in + e_k.
inline WideTensor qt_conv2d_wide(const QTensor& input, const QTensor& kernel, std::size_t stride, std::size_t pad) {
    const auto g = conv_geometry(input.shape, kernel.shape, stride, pad);
    const auto cols = kernels::im2col<std::int32_t>(input.codes, g);
    const auto kt = kernels::transpose<std::int32_t>(kernel.codes, g.filters, g.patch());
    std::vector<std::int64_t> rows(g.rows() * g.filters);
    detail::gemm_exact(cols, kt, rows.data(), g.rows(), g.filters, g.patch(), max_abs_code(input), max_abs_code(kernel), "conv2d");
    WideTensor out({g.batch, g.filters, g.out_h(), g.out_w()}, input.format.exponent + kernel.format.exponent);
    out.acc = kernels::rows_to_nchw<std::int64_t>(rows, g.batch, g.filters, g.out_h() * g.out_w());
    return out;
}

inline QTensor qt_conv2d(const QTensor& input, const QTensor& kernel, std::size_t stride, std::size_t pad, int out_bits) {
    return requantize(qt_conv2d_wide(input, kernel, stride, pad), out_bits);
}

// ---------------------------------------------------------------- elementwise

namespace detail {

inline bool all_zero(const QTensor& q) {
    return std::all_of(q.codes.begin(), q.codes.end(), [](auto c) { return c == 0; });
}

inline constexpr int kAlignmentBits = 90;

// Common exponent for alignment; all-zero operands do not constrain it. Codes
// more than kAlignmentBits below the larger exponent only act as sticky bits.
inline int aligned_exponent(const QTensor& a, const QTensor& b) {
    if (all_zero(a)) return b.format.exponent;
    if (all_zero(b)) return a.format.exponent;
    const int hi = std::max(a.format.exponent, b.format.exponent);
    return std::max(std::min(a.format.exponent, b.format.exponent), hi - kAlignmentBits);
}

// code * 2^from expressed in units of 2^to. Exact when from >= to; otherwise
// rounded to odd, which keeps every later rounding to fewer bits correct.
inline int128 aligned(std::int32_t code, int from, int to) {
    if (code == 0) return 0;
    if (from >= to) return static_cast<int128>(code) << (from - to);
    const int d = to - from;
    if (d >= 40) return code < 0 ? -1 : 1;
    const std::int64_t c = code;
    std::int64_t q = c >> d;
    if ((q << d) != c) q |= 1;
    return q;
}

inline QTensor add_sub(const QTensor& a, const QTensor& b, int out_bits, int sign, int zero_exponent) {
    if (a.shape != b.shape) throw Error("elementwise: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const int e = aligned_exponent(a, b);
    std::vector<int128> exact(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        exact[i] = aligned(a.codes[i], a.format.exponent, e) + sign * aligned(b.codes[i], b.format.exponent, e);
    return requantize_values<int128>(a.shape, exact, e, out_bits, zero_exponent);
}

} // namespace detail

inline QTensor qt_add(const QTensor& a, const QTensor& b, int out_bits, int zero_exponent = kDefaultZeroExponent) {
    return detail::add_sub(a, b, out_bits, 1, zero_exponent);
}
inline QTensor qt_sub(const QTensor& a, const QTensor& b, int out_bits, int zero_exponent = kDefaultZeroExponent) {
    return detail::add_sub(a, b, out_bits, -1, zero_exponent);
}

/// x + bias broadcast along dimension 1 (features of N x F, channels of NCHW).
inline QTensor qt_add_bias(const QTensor& x, const QTensor& bias, int out_bits, int zero_exponent = kDefaultZeroExponent) {
    if (x.shape.size() < 2 || bias.shape.size() != 1 || bias.shape[0] != x.shape[1])
        throw Error("add_bias: shape mismatch " + shape_str(x.shape) + " + " + shape_str(bias.shape));
    const int e = detail::aligned_exponent(x, bias);
    const std::size_t channels = x.shape[1];
    const std::size_t inner = x.size() / (x.shape[0] * channels);
    std::vector<int128> exact(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t c = (i / inner) % channels;
        exact[i] = detail::aligned(x.codes[i], x.format.exponent, e) + detail::aligned(bias.codes[c], bias.format.exponent, e);
    }
    return requantize_values<int128>(x.shape, exact, e, out_bits, zero_exponent);
}

inline QTensor qt_relu(const QTensor& a) {
    QTensor out = a;
    for (auto& c : out.codes) c = std::max<std::int32_t>(c, 0);
    return out;
}

/// Codewise max per 2x2 window; with one shared exponent code order is value order.
inline QTensor qt_max_pool_2x2(const QTensor& a, std::vector<std::uint32_t>* argmax = nullptr) {
    if (a.shape.size() != 4) throw Error("max_pool_2x2 expects NCHW, got " + shape_str(a.shape));
    QTensor out({a.shape[0], a.shape[1], a.shape[2] / 2, a.shape[3] / 2}, a.format);
    out.codes = kernels::max_pool_2x2<std::int32_t>(a.codes, a.shape[0], a.shape[1], a.shape[2], a.shape[3], argmax);
    return out;
}

enum class ElementwiseOp { add, sub, relu, max_pool_2x2 };

/// Dispatch form; `b` is ignored by the unary ops.
inline QTensor qt_elementwise(ElementwiseOp op, const QTensor& a, const QTensor* b = nullptr, int out_bits = 0) {
    switch (op) {
    case ElementwiseOp::add:
    case ElementwiseOp::sub:
        if (!b) throw Error("elementwise: binary op needs two operands");
        return op == ElementwiseOp::add ? qt_add(a, *b, out_bits) : qt_sub(a, *b, out_bits);
    case ElementwiseOp::relu: return qt_relu(a);
    case ElementwiseOp::max_pool_2x2: return qt_max_pool_2x2(a);
    }
    throw Error("elementwise: unknown op");
}

// ---------------------------------------------------------------- backward helpers

/// Zero the gradient wherever the forward ReLU output was not positive.
inline QTensor qt_relu_backward(const QTensor& relu_out, const QTensor& grad) {
    if (relu_out.shape != grad.shape) throw Error("relu backward: shape mismatch");
    QTensor out = grad;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (relu_out.codes[i] <= 0) out.codes[i] = 0;
    return out;
}

inline QTensor qt_max_pool_backward(const QTensor& grad, const std::vector<std::uint32_t>& argmax, const Shape& input_shape) {
    if (argmax.size() != grad.size()) throw Error("max_pool backward: stale argmax cache");
    QTensor out(input_shape, grad.format);
    for (std::size_t i = 0; i < grad.size(); ++i) out.codes[argmax[i]] = grad.codes[i];
    return out;
}

/// Exact sum over every dimension except 1 (bias gradient).
inline WideTensor qt_channel_sum_wide(const QTensor& g) {
    if (g.shape.size() < 2) throw Error("channel sum needs at least 2 dimensions");
    const std::size_t channels = g.shape[1];
    const std::size_t inner = g.size() / (g.shape[0] * channels);
    WideTensor out({channels}, g.format.exponent);
    for (std::size_t i = 0; i < g.size(); ++i) out.acc[(i / inner) % channels] += g.codes[i];
    return out;
}

struct QLinearGrads {
    WideTensor input;  // empty when not requested
    WideTensor weight;
    WideTensor bias;
};

/// Gradients of y = x W^T + b for x (N x I), W (O x I), g = dL/dy (N x O).
inline QLinearGrads qt_linear_backward_wide(const QTensor& x, const QTensor& w, const QTensor& g, bool need_input) {
    QLinearGrads out;
    out.weight = qt_matmul_wide(transpose(g), x);
    out.bias = qt_channel_sum_wide(g);
    if (need_input) out.input = qt_matmul_wide(g, w);
    return out;
}

/// Gradients of the conv forward; `grad` is dL/d(output) in NCHW.
inline QLinearGrads qt_conv2d_backward_wide(const QTensor& input, const QTensor& kernel, const QTensor& grad, std::size_t stride,
                                            std::size_t pad, bool need_input) {
    const auto g = conv_geometry(input.shape, kernel.shape, stride, pad);
    const Shape out_shape{g.batch, g.filters, g.out_h(), g.out_w()};
    if (grad.shape != out_shape) throw Error("conv2d backward: gradient shape " + shape_str(grad.shape) + " != " + shape_str(out_shape));
    const std::size_t spatial = g.out_h() * g.out_w();

    QTensor gmat({g.rows(), g.filters}, grad.format);
    gmat.codes = kernels::nchw_to_rows<std::int32_t>(grad.codes, g.batch, g.filters, spatial);
    const auto cols = kernels::im2col<std::int32_t>(input.codes, g);
    const auto gmat_t = transpose(gmat);

    QLinearGrads out;
    out.weight = WideTensor(kernel.shape, grad.format.exponent + input.format.exponent);
    detail::gemm_exact(gmat_t.codes, cols, out.weight.acc.data(), g.filters, g.patch(), g.rows(), max_abs_code(grad),
                       max_abs_code(input), "conv2d backward");
    out.bias = qt_channel_sum_wide(grad);
    if (need_input) {
        std::vector<std::int64_t> dcols(g.rows() * g.patch());
        // overlapping windows add up to ceil(k/stride)^2 extra terms in col2im
        const std::uint64_t overlap = ((g.kernel_h + g.stride - 1) / g.stride) * ((g.kernel_w + g.stride - 1) / g.stride);
        detail::accumulator_for(max_abs_code(grad), max_abs_code(kernel), g.filters * overlap, "conv2d backward");
        detail::gemm_exact(gmat.codes, kernel.codes, dcols.data(), g.rows(), g.patch(), g.filters, max_abs_code(grad),
                           max_abs_code(kernel), "conv2d backward");
        out.input = WideTensor(input.shape, grad.format.exponent + kernel.format.exponent);
        out.input.acc = kernels::col2im<std::int64_t>(dcols, g);
    }
    return out;
}

} // namespace lbt
