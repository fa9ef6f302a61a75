// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "lbt/bitwidth.hpp"

using namespace lbt;

namespace {

AdvisorQuery q(long long classes, double alpha = kDefaultAlpha) { return {classes, alpha}; }

// floor(log2(N - 1) + log2(2 / alpha)) + 1 in extended precision.
int required_oracle(long long classes, double alpha) {
    const long double rhs = std::log2(static_cast<long double>(classes - 1)) + std::log2(2.0L / alpha);
    return static_cast<int>(std::floor(rhs)) + 1;
}

} // namespace

TEST(Feasible, Examples) {
    EXPECT_TRUE(feasible(2, q(2)));
    EXPECT_FALSE(feasible(8, q(1000)));
    EXPECT_TRUE(feasible(12, q(1000)));
    EXPECT_FALSE(feasible(11, q(1000)));
    EXPECT_THROW(feasible(1, q(10)), Error);
    EXPECT_THROW(feasible(8, q(1)), Error);
    EXPECT_THROW(feasible(8, q(10, 0.0)), Error);
    EXPECT_THROW(feasible(8, q(10, 1.0)), Error);
}

TEST(RequiredBits, Examples) {
    EXPECT_EQ(required_bits(q(10)), 6);
    EXPECT_LE(required_bits(q(10)), 8);
    EXPECT_EQ(required_bits(q(1000, 0.125)), 14);
    EXPECT_NEAR(required_bits_bound(q(1000, 0.125)), 13.9643, 1e-4);
    EXPECT_EQ(required_bits(q(2)), 3);
    EXPECT_EQ(required_bits(q(1000)), 12);
    EXPECT_NEAR(required_bits_bound(q(1000)), 11.9643, 1e-4);
}

// At exact equality alpha * 2^(bw-1) == N - 1 the feasibility check accepts bw
// while the strict bound asks for one more bit.
TEST(RequiredBits, BoundaryEquality) {
    EXPECT_TRUE(feasible(2, q(2)));
    EXPECT_EQ(required_bits(q(2)), 3);
    EXPECT_TRUE(feasible(11, q(513)));
    EXPECT_EQ(required_bits(q(513)), 12);
    EXPECT_FALSE(feasible(11, q(514)));
    EXPECT_EQ(required_bits(q(514)), 12);
}

TEST(RequiredBits, AgreesWithLogarithmOracle) {
    const std::vector<double> alphas = {0.5, 0.125, 0.25, 0.3, 0.75, 0.01, 0.999};
    for (double a : alphas) {
        for (long long n = 2; n <= 20000; ++n) {
            const int bw = required_bits(q(n, a));
            ASSERT_EQ(bw, required_oracle(n, a)) << n << " " << a;
            ASSERT_TRUE(feasible(bw, q(n, a)));
            const bool equality = std::ldexp(a, bw - 2) == static_cast<double>(n - 1);
            if (bw > 2) ASSERT_EQ(feasible(bw - 1, q(n, a)), equality) << n << " " << a;
        }
    }
    for (long long n : {1LL << 30, (1LL << 40) + 7, 1LL << 52})
        EXPECT_EQ(required_bits(q(n)), required_oracle(n, 0.5));
}

TEST(RequiredBits, Monotone) {
    const std::vector<double> alphas = {0.01, 0.1, 0.125, 0.3, 0.5, 0.9};
    for (long long n = 2; n < 3000; ++n)
        for (std::size_t i = 0; i < alphas.size(); ++i) {
            ASSERT_LE(required_bits(q(n, alphas[i])), required_bits(q(n + 1, alphas[i])));
            if (i + 1 < alphas.size()) ASSERT_GE(required_bits(q(n, alphas[i])), required_bits(q(n, alphas[i + 1])));
        }
}

TEST(FeasibilityTable, RowsMatchFeasible) {
    const auto rows = feasibility_table(q(1000));
    ASSERT_EQ(rows.size(), 15u);
    EXPECT_EQ(rows.front().bits, 2);
    EXPECT_EQ(rows.back().bits, 16);
    for (const auto& r : rows) EXPECT_EQ(r.feasible, r.bits >= 12) << r.bits;
}
