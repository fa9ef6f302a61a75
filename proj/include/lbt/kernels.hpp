// SPDX-License-Identifier: Apache-2.0

#pragma once

// Layout kernels shared by the integer and the double paths. All loops run in a
// fixed order so results are bit-identical from run to run.

#include <cstddef>
#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "error.hpp"

namespace lbt::kernels {

/// C = A * B with A (M x K) and B (K x N), row-major. Each output row is built
/// as a sequence of scaled rows of B, so every element sums its K terms in
/// ascending k order and the inner loop vectorizes.
template <class Acc, class In, class Out>
void gemm_nn(const In* a, const In* b, Out* c, std::size_t m, std::size_t n, std::size_t k) {
    std::vector<Acc> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), Acc{});
        const In* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Acc x = static_cast<Acc>(ar[p]);
            if (x == Acc{}) continue;
            const In* br = b + p * n;
            Acc* r = row.data();
            for (std::size_t j = 0; j < n; ++j) r[j] += x * static_cast<Acc>(br[j]);
        }
        Out* cr = c + i * n;
        for (std::size_t j = 0; j < n; ++j) cr[j] = static_cast<Out>(row[j]);
    }
}

template <class T>
std::vector<T> transpose(std::span<const T> src, std::size_t rows, std::size_t cols) {
    std::vector<T> dst(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    return dst;
}

struct ConvGeometry {
    std::size_t batch = 0, channels = 0, height = 0, width = 0;
    std::size_t filters = 0, kernel_h = 0, kernel_w = 0;
    std::size_t stride = 1, pad = 0;

    std::size_t out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
    std::size_t out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
    std::size_t patch() const { return channels * kernel_h * kernel_w; }
    std::size_t rows() const { return batch * out_h() * out_w(); }

    void check() const {
        if (stride == 0) throw Error("conv stride must be positive");
        if (kernel_h == 0 || kernel_w == 0 || height + 2 * pad < kernel_h || width + 2 * pad < kernel_w)
            throw Error("conv kernel larger than padded input");
    }
};

/// NCHW input -> (N*OH*OW) x (C*KH*KW) patch matrix, zero padded.
template <class T>
std::vector<T> im2col(std::span<const T> x, const ConvGeometry& g) {
    const std::size_t oh = g.out_h(), ow = g.out_w(), patch = g.patch();
    std::vector<T> cols(g.rows() * patch, T{});
    if (g.pad == 0) {
        for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xo = 0; xo < ow; ++xo) {
                    T* row = cols.data() + ((n * oh + y) * ow + xo) * patch;
                    for (std::size_t c = 0; c < g.channels; ++c)
                        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                            const T* src = x.data() + ((n * g.channels + c) * g.height + y * g.stride + ky) * g.width + xo * g.stride;
                            std::copy(src, src + g.kernel_w, row + (c * g.kernel_h + ky) * g.kernel_w);
                        }
                }
        return cols;
    }
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo) {
                T* row = cols.data() + ((n * oh + y) * ow + xo) * patch;
                for (std::size_t c = 0; c < g.channels; ++c)
                    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                            row[(c * g.kernel_h + ky) * g.kernel_w + kx] =
                                x[((n * g.channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)];
                        }
                    }
            }
    return cols;
}

/// Adjoint of im2col: scatter-add the patch matrix back onto an NCHW tensor.
template <class T>
std::vector<T> col2im(std::span<const T> cols, const ConvGeometry& g) {
    const std::size_t oh = g.out_h(), ow = g.out_w(), patch = g.patch();
    std::vector<T> x(g.batch * g.channels * g.height * g.width, T{});
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo) {
                const T* row = cols.data() + ((n * oh + y) * ow + xo) * patch;
                for (std::size_t c = 0; c < g.channels; ++c)
                    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
                        const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                            const auto ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                            x[((n * g.channels + c) * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                                row[(c * g.kernel_h + ky) * g.kernel_w + kx];
                        }
                    }
            }
    return x;
}

/// (N*S) x C row matrix <-> N x C x S tensor, where S is the flattened spatial size.
template <class T>
std::vector<T> rows_to_nchw(std::span<const T> rows, std::size_t batch, std::size_t channels, std::size_t spatial) {
    std::vector<T> out(rows.size());
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < spatial; ++s)
            for (std::size_t c = 0; c < channels; ++c)
                out[(n * channels + c) * spatial + s] = rows[(n * spatial + s) * channels + c];
    return out;
}

template <class T>
std::vector<T> nchw_to_rows(std::span<const T> t, std::size_t batch, std::size_t channels, std::size_t spatial) {
    std::vector<T> out(t.size());
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t s = 0; s < spatial; ++s)
                out[(n * spatial + s) * channels + c] = t[(n * channels + c) * spatial + s];
    return out;
}

/// 2x2 stride-2 max pooling over NCHW; `argmax` receives the flat input index
/// of each winner (first maximum in scan order wins ties).
template <class T>
std::vector<T> max_pool_2x2(std::span<const T> x, std::size_t batch, std::size_t channels, std::size_t h, std::size_t w,
                            std::vector<std::uint32_t>* argmax) {
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<T> out(batch * channels * oh * ow);
    if (argmax) argmax->assign(out.size(), 0);
    for (std::size_t nc = 0; nc < batch * channels; ++nc)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo) {
                std::size_t best = nc * h * w + (2 * y) * w + 2 * xo;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = nc * h * w + (2 * y + dy) * w + 2 * xo + dx;
                        if (x[idx] > x[best]) best = idx;
                    }
                const std::size_t o = (nc * oh + y) * ow + xo;
                out[o] = x[best];
                if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
            }
    return out;
}

} // namespace lbt::kernels
