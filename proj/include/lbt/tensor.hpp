// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"
#include "fixedpoint.hpp"

namespace lbt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

/// Row-major array of doubles; the full-precision reference path.
struct RealTensor {
    Shape shape;
    std::vector<double> values;

    RealTensor() = default;
    explicit RealTensor(Shape s, double fill = 0.0) : shape(std::move(s)), values(shape_size(shape), fill) {}
    RealTensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != shape_size(shape))
            throw Error("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) + " values");
    }

    std::size_t size() const { return values.size(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }

    void validate() const {
        if (values.size() != shape_size(shape)) throw Error("tensor value count does not match shape");
        for (double v : values)
            if (!std::isfinite(v)) throw Error("non-finite input");
    }

    friend bool operator==(const RealTensor&, const RealTensor&) = default;
};

/// Row-major integer codes sharing one fixed-point format.
struct QTensor {
    Shape shape;
    std::vector<std::int32_t> codes;
    FixedPointFormat format;

    QTensor() = default;
    QTensor(Shape s, FixedPointFormat f) : shape(std::move(s)), codes(shape_size(shape), 0), format(f) {}
    QTensor(Shape s, std::vector<std::int32_t> c, FixedPointFormat f)
        : shape(std::move(s)), codes(std::move(c)), format(f) {
        validate();
    }

    std::size_t size() const { return codes.size(); }

    double value(std::size_t i) const { return dequantize_code(codes[i], format.exponent); }

    void validate() const {
        check_format(format);
        if (codes.size() != shape_size(shape)) throw Error("tensor code count does not match shape");
        for (auto c : codes)
            if (c < format.min_code() || c > format.max_code())
                throw Error("code " + std::to_string(c) + " outside " + std::to_string(format.bit_width) + "-bit range");
    }

    friend bool operator==(const QTensor&, const QTensor&) = default;
};

/// Exact pre-requantization result of an integer op: value = acc * 2^exponent.
struct WideTensor {
    Shape shape;
    std::vector<std::int64_t> acc;
    int exponent = 0;

    WideTensor() = default;
    WideTensor(Shape s, int e) : shape(std::move(s)), acc(shape_size(shape), 0), exponent(e) {}

    std::size_t size() const { return acc.size(); }
    double value(std::size_t i) const { return std::ldexp(static_cast<double>(acc[i]), exponent); }
};

inline RealTensor dequantize(const QTensor& q) {
    RealTensor out(q.shape);
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = q.value(i);
    return out;
}

inline RealTensor dequantize(const WideTensor& w) {
    RealTensor out(w.shape);
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = w.value(i);
    return out;
}

/// Quantize every element with one shared format.
inline QTensor quantize_with(const RealTensor& t, const FixedPointFormat& f) {
    check_format(f);
    QTensor out(t.shape, f);
    for (std::size_t i = 0; i < t.size(); ++i) out.codes[i] = static_cast<std::int32_t>(quantize_code(t[i], f));
    return out;
}

/// Dynamic quantization: exponent chosen from the tensor's own max magnitude.
inline QTensor qt_quantize(const RealTensor& t, int bit_width, int zero_exponent = kDefaultZeroExponent) {
    if (t.values.size() != shape_size(t.shape)) throw Error("tensor value count does not match shape");
    const int e = choose_exponent(t.values, bit_width, zero_exponent);
    return quantize_with(t, {bit_width, e});
}

} // namespace lbt
