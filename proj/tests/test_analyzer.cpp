// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "lbt/analyzer.hpp"
#include "lbt/bitwidth.hpp"

using namespace lbt;

namespace {

std::vector<int> bit_range(int lo, int hi) {
    std::vector<int> v;
    for (int b = lo; b <= hi; ++b) v.push_back(b);
    return v;
}

const SweepResult& figure_sweep() {
    static const SweepResult r = run_sweep({{10, 100, 1000}, bit_range(2, 16), 0.1, 1000, 1});
    return r;
}

} // namespace

TEST(Sweep, UniformLogitExamples) {
    for (int bits : {2, 3, 8, 16}) EXPECT_EQ(run_cell(2, bits, 0.0, 50, 1).zeroed_fraction, 0.0);
    EXPECT_EQ(run_cell(1000, 8, 0.0, 20, 1).zeroed_fraction, 1.0);
    EXPECT_EQ(run_cell(1000, 16, 0.0, 20, 1).zeroed_fraction, 0.0);
    EXPECT_EQ(run_cell(2, 8, 0.0, 5, 1).bias, 0.0);
}

TEST(Sweep, Validation) {
    EXPECT_THROW(run_sweep({{}, {8}, 0.1, 10, 1}), Error);
    EXPECT_THROW(run_sweep({{10}, {}, 0.1, 10, 1}), Error);
    EXPECT_THROW(run_sweep({{1}, {8}, 0.1, 10, 1}), Error);
    EXPECT_THROW(run_sweep({{10}, {1}, 0.1, 10, 1}), Error);
    EXPECT_THROW(run_sweep({{10}, {8}, -1.0, 10, 1}), Error);
    EXPECT_THROW(run_sweep({{10}, {8}, 0.1, 0, 1}), Error);
}

TEST(Sweep, ZeroedFractionMonotone) {
    const auto& r = figure_sweep();
    for (int c : {10, 100, 1000})
        for (int b = 2; b < 16; ++b) {
            const double z = r.at(c, b).zeroed_fraction;
            EXPECT_GE(z, 0.0);
            EXPECT_LE(z, 1.0);
            EXPECT_GE(z, r.at(c, b + 1).zeroed_fraction) << c << " classes " << b << " bits";
        }
    for (int b = 2; b <= 16; ++b) {
        EXPECT_LE(r.at(10, b).zeroed_fraction, r.at(100, b).zeroed_fraction) << b;
        EXPECT_LE(r.at(100, b).zeroed_fraction, r.at(1000, b).zeroed_fraction) << b;
    }
    EXPECT_EQ(r.at(1000, 8).zeroed_fraction, 1.0);
    EXPECT_EQ(r.at(1000, 16).zeroed_fraction, 0.0);
}

// Each component rounds by at most half a step of the anchoring grid, so the
// mean sum cannot leave N_c half-steps; when every small component vanishes
// only the negative target entry is left.
TEST(Sweep, BiasBoundAndSign) {
    const auto& r = figure_sweep();
    for (int c : {10, 100, 1000}) {
        for (int b = 2; b <= 16; ++b) {
            const auto& cell = r.at(c, b);
            const double half = std::ldexp(1.0, choose_exponent_for_max(1.0, b)) / 2;
            EXPECT_LE(std::abs(cell.bias), c * half) << c << " " << b;
            if (cell.zeroed_fraction == 1.0) EXPECT_LT(cell.bias, 0.0) << c << " " << b;
        }
        EXPECT_LT(std::abs(r.at(c, 16).bias), std::abs(r.at(c, 4).bias)) << c;
    }
    EXPECT_LT(r.at(1000, 8).bias, -0.9);
}

// First bit width whose zeroed fraction drops under alpha never exceeds the
// advisor's answer and stays within two bits of it.
TEST(Sweep, AgreesWithAdvisor) {
    const auto& r = figure_sweep();
    for (int c : {10, 100, 1000}) {
        int first = -1;
        for (int b = 2; b <= 16 && first < 0; ++b)
            if (r.at(c, b).zeroed_fraction < kDefaultAlpha) first = b;
        const int need = required_bits({c, kDefaultAlpha});
        EXPECT_LE(first, need) << c;
        EXPECT_GE(first, need - 2) << c;
    }
}

TEST(Sweep, DeterministicAndOrderFree) {
    const SweepResult a = run_sweep({{100, 10}, {9, 4, 12}, 0.5, 200, 42});
    const SweepResult b = run_sweep({{10, 100}, {12, 9, 4}, 0.5, 200, 42});
    for (const auto& cell : a.cells) {
        EXPECT_EQ(cell.zeroed_fraction, b.at(cell.classes, cell.bits).zeroed_fraction);
        EXPECT_EQ(cell.bias, b.at(cell.classes, cell.bits).bias);
    }
    const SweepResult c = run_sweep({{100, 10}, {9, 4, 12}, 0.5, 200, 43});
    bool differs = false;
    for (const auto& cell : a.cells) differs |= cell.bias != c.at(cell.classes, cell.bits).bias;
    EXPECT_TRUE(differs);
    EXPECT_THROW(a.at(7, 7), Error);
}

TEST(Sweep, Csv) {
    SweepResult r;
    r.cells.push_back({10, 8, 0.1234567, -0.000123456789});
    r.cells.push_back({1000, 16, 0.0, 1.0});
    std::ostringstream os;
    write_sweep_csv(os, r);
    EXPECT_EQ(os.str(), "classes,bits,zeroed_fraction,bias\n10,8,0.123457,-0.000123457\n1000,16,0,1\n");
}
