// SPDX-License-Identifier: Apache-2.0

#pragma once

// Double-precision counterparts of qops.hpp, used by the full-precision
// reference path and as test oracles.

#include <algorithm>
#include <vector>

#include "kernels.hpp"
#include "qops.hpp"
#include "tensor.hpp"

namespace lbt {

inline RealTensor transpose(const RealTensor& t) {
    if (t.shape.size() != 2) throw Error("transpose needs a 2-D tensor");
    return RealTensor({t.shape[1], t.shape[0]}, kernels::transpose<double>(t.values, t.shape[0], t.shape[1]));
}

inline RealTensor rt_matmul(const RealTensor& a, const RealTensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw Error("matmul: dimension mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape));
    RealTensor out({a.shape[0], b.shape[1]});
    kernels::gemm_nn<double>(a.values.data(), b.values.data(), out.values.data(), a.shape[0], b.shape[1], a.shape[1]);
    return out;
}

inline RealTensor rt_matmul_nt(const RealTensor& a, const RealTensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1])
        throw Error("matmul: dimension mismatch " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
    return rt_matmul(a, transpose(b));
}

inline RealTensor rt_conv2d(const RealTensor& input, const RealTensor& kernel, std::size_t stride, std::size_t pad) {
    const auto g = conv_geometry(input.shape, kernel.shape, stride, pad);
    const auto cols = kernels::im2col<double>(input.values, g);
    const auto kt = kernels::transpose<double>(kernel.values, g.filters, g.patch());
    std::vector<double> rows(g.rows() * g.filters);
    kernels::gemm_nn<double>(cols.data(), kt.data(), rows.data(), g.rows(), g.filters, g.patch());
    return RealTensor({g.batch, g.filters, g.out_h(), g.out_w()},
                      kernels::rows_to_nchw<double>(rows, g.batch, g.filters, g.out_h() * g.out_w()));
}

inline RealTensor rt_add_bias(const RealTensor& x, const RealTensor& bias) {
    if (x.shape.size() < 2 || bias.shape.size() != 1 || bias.shape[0] != x.shape[1])
        throw Error("add_bias: shape mismatch " + shape_str(x.shape) + " + " + shape_str(bias.shape));
    const std::size_t channels = x.shape[1];
    const std::size_t inner = x.size() / (x.shape[0] * channels);
    RealTensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[(i / inner) % channels];
    return out;
}

inline RealTensor rt_relu(const RealTensor& x) {
    RealTensor out = x;
    for (auto& v : out.values) v = std::max(v, 0.0);
    return out;
}

inline RealTensor rt_max_pool_2x2(const RealTensor& x, std::vector<std::uint32_t>* argmax = nullptr) {
    if (x.shape.size() != 4) throw Error("max_pool_2x2 expects NCHW, got " + shape_str(x.shape));
    return RealTensor({x.shape[0], x.shape[1], x.shape[2] / 2, x.shape[3] / 2},
                      kernels::max_pool_2x2<double>(x.values, x.shape[0], x.shape[1], x.shape[2], x.shape[3], argmax));
}

inline RealTensor rt_relu_backward(const RealTensor& relu_out, const RealTensor& grad) {
    RealTensor out = grad;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (relu_out[i] <= 0.0) out[i] = 0.0;
    return out;
}

inline RealTensor rt_max_pool_backward(const RealTensor& grad, const std::vector<std::uint32_t>& argmax, const Shape& input_shape) {
    if (argmax.size() != grad.size()) throw Error("max_pool backward: stale argmax cache");
    RealTensor out(input_shape);
    for (std::size_t i = 0; i < grad.size(); ++i) out[argmax[i]] = grad[i];
    return out;
}

inline RealTensor rt_channel_sum(const RealTensor& g) {
    const std::size_t channels = g.shape[1];
    const std::size_t inner = g.size() / (g.shape[0] * channels);
    RealTensor out({channels});
    for (std::size_t i = 0; i < g.size(); ++i) out[(i / inner) % channels] += g[i];
    return out;
}

struct RLinearGrads {
    RealTensor input;
    RealTensor weight;
    RealTensor bias;
};

inline RLinearGrads rt_linear_backward(const RealTensor& x, const RealTensor& w, const RealTensor& g, bool need_input) {
    RLinearGrads out;
    out.weight = rt_matmul(transpose(g), x);
    out.bias = rt_channel_sum(g);
    if (need_input) out.input = rt_matmul(g, w);
    return out;
}

inline RLinearGrads rt_conv2d_backward(const RealTensor& input, const RealTensor& kernel, const RealTensor& grad, std::size_t stride,
                                       std::size_t pad, bool need_input) {
    const auto g = conv_geometry(input.shape, kernel.shape, stride, pad);
    const std::size_t spatial = g.out_h() * g.out_w();
    const auto gmat = kernels::nchw_to_rows<double>(grad.values, g.batch, g.filters, spatial);
    const auto cols = kernels::im2col<double>(input.values, g);
    const auto gmat_t = kernels::transpose<double>(gmat, g.rows(), g.filters);

    RLinearGrads out;
    out.weight = RealTensor(kernel.shape);
    kernels::gemm_nn<double>(gmat_t.data(), cols.data(), out.weight.values.data(), g.filters, g.patch(), g.rows());
    out.bias = rt_channel_sum(grad);
    if (need_input) {
        std::vector<double> dcols(g.rows() * g.patch());
        kernels::gemm_nn<double>(gmat.data(), kernel.values.data(), dcols.data(), g.rows(), g.patch(), g.filters);
        out.input = RealTensor(input.shape, kernels::col2im<double>(dcols, g));
    }
    return out;
}

} // namespace lbt
