// SPDX-License-Identifier: Apache-2.0

#pragma once

// Bit-width rule for the classifier feeding softmax + cross-entropy. With the
// gradient's largest element near 1, the round-off of the |class|-1 small
// components stays under alpha when alpha / (|class| - 1) >= 2^-(bw - 1).

#include <cmath>
#include <string>
#include <vector>

#include "error.hpp"

namespace lbt {

struct AdvisorQuery {
    long long num_classes = 2;
    double alpha = 0.5;

    void validate() const {
        if (num_classes < 2) throw Error("class count must be >= 2");
        if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must be in (0, 1)");
    }
};

inline constexpr double kDefaultAlpha = 0.5;

/// alpha / (|class| - 1) >= 2^-(bw - 1), compared exactly as alpha * 2^(bw-1) >= |class| - 1.
inline bool feasible(int bw, const AdvisorQuery& q) {
    q.validate();
    if (bw < 2) throw Error("bit width must be >= 2");
    return std::ldexp(q.alpha, bw - 1) >= static_cast<double>(q.num_classes - 1);
}

/// Smallest integer strictly above log2(|class| - 1) + log2(2 / alpha).
inline int required_bits(const AdvisorQuery& q) {
    q.validate();
    int bw = 1;
    while (!(std::ldexp(q.alpha, bw - 1) > static_cast<double>(q.num_classes - 1))) ++bw;
    return bw;
}

/// The unrounded right-hand side, for display.
inline double required_bits_bound(const AdvisorQuery& q) {
    q.validate();
    return std::log2(static_cast<double>(q.num_classes - 1)) + std::log2(2.0 / q.alpha);
}

struct FeasibilityRow {
    int bits;
    bool feasible;
};

inline std::vector<FeasibilityRow> feasibility_table(const AdvisorQuery& q, int lo = 2, int hi = 16) {
    std::vector<FeasibilityRow> rows;
    for (int b = lo; b <= hi; ++b) rows.push_back({b, feasible(b, q)});
    return rows;
}

} // namespace lbt
