// SPDX-License-Identifier: Apache-2.0

#pragma once

// Monte-Carlo look at the classifier gradient y - t at an early training stage:
// logits ~ N(0, sigma^2), the gradient is quantized per tensor, and we count
// how many non-target components round to zero and how far the sum drifts
// from its exact value of 0.

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "fixedpoint.hpp"
#include "nn.hpp"
#include "tensor.hpp"

namespace lbt {

struct SweepSpec {
    std::vector<int> class_sizes;
    std::vector<int> bit_widths;
    double logit_scale = 0.1;
    std::size_t samples = 1000;
    std::uint64_t seed = 1;

    void validate() const {
        if (class_sizes.empty() || bit_widths.empty()) throw Error("sweep needs at least one class size and one bit width");
        for (int c : class_sizes)
            if (c < 2) throw Error("class size must be >= 2");
        for (int b : bit_widths) check_bit_width(b);
        if (!(logit_scale >= 0.0)) throw Error("logit scale must be >= 0");
        if (samples < 1) throw Error("samples must be >= 1");
    }
};

struct SweepCell {
    int classes = 0;
    int bits = 0;
    double zeroed_fraction = 0.0; // non-target components quantized to exactly 0
    double bias = 0.0;            // mean over samples of sum_i quantized g_i
};

struct SweepResult {
    std::vector<SweepCell> cells;

    const SweepCell& at(int classes, int bits) const {
        for (const auto& c : cells)
            if (c.classes == classes && c.bits == bits) return c;
        throw Error("no sweep cell for " + std::to_string(classes) + " classes at " + std::to_string(bits) + " bits");
    }
};

/// Independent stream per (seed, classes, bits): cell order does not matter.
inline std::mt19937_64 cell_rng(std::uint64_t seed, int classes, int bits) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(classes),
                      static_cast<std::uint32_t>(bits)};
    return std::mt19937_64(seq);
}

inline SweepCell run_cell(int classes, int bits, double sigma, std::size_t samples, std::uint64_t seed) {
    auto rng = cell_rng(seed, classes, bits);
    std::normal_distribution<double> logit(0.0, sigma > 0.0 ? sigma : 1.0);
    std::uniform_int_distribution<int> pick(0, classes - 1);
    const auto n = static_cast<std::size_t>(classes);

    std::uint64_t zeros = 0;
    double bias_sum = 0.0;
    RealTensor s({1, n});
    for (std::size_t k = 0; k < samples; ++k) {
        for (auto& v : s.values) v = sigma > 0.0 ? logit(rng) : 0.0;
        const int gt = pick(rng);
        const RealTensor t = one_hot({gt}, n);
        const auto sm = softmax_xent_forward(s, t);
        const QTensor g = softmax_xent_backward(sm.probs, t, bits);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sum += g.value(i);
            if (i != static_cast<std::size_t>(gt) && g.codes[i] == 0) ++zeros;
        }
        bias_sum += sum;
    }
    SweepCell cell;
    cell.classes = classes;
    cell.bits = bits;
    cell.zeroed_fraction = static_cast<double>(zeros) / (static_cast<double>(samples) * static_cast<double>(classes - 1));
    cell.bias = bias_sum / static_cast<double>(samples);
    return cell;
}

inline SweepResult run_sweep(const SweepSpec& spec) {
    spec.validate();
    SweepResult r;
    for (int c : spec.class_sizes)
        for (int b : spec.bit_widths) r.cells.push_back(run_cell(c, b, spec.logit_scale, spec.samples, spec.seed));
    return r;
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
    os << "classes,bits,zeroed_fraction,bias\n";
    char buf[64];
    for (const auto& c : r.cells) {
        os << c.classes << ',' << c.bits << ',';
        std::snprintf(buf, sizeof buf, "%.6g", c.zeroed_fraction);
        os << buf << ',';
        std::snprintf(buf, sizeof buf, "%.6g", c.bias);
        os << buf << '\n';
    }
}

} // namespace lbt
