// SPDX-License-Identifier: Apache-2.0

#pragma once

// SGD, momentum and ADAM over quantized parameters, each with an optional lazy
// update: the parameter write goes through a Kahan accumulator `acc` that
// collects updates too small for the parameter grid and hands them over once
// they become representable.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fixedpoint.hpp"
#include "tensor.hpp"

namespace lbt {

enum class OptimizerKind { sgd, momentum, adam };

inline std::string to_string(OptimizerKind k) {
    switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::momentum: return "momentum";
    case OptimizerKind::adam: return "adam";
    }
    return "?";
}

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "momentum") return OptimizerKind::momentum;
    if (s == "adam") return OptimizerKind::adam;
    throw Error("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool lazy = false;
    int state_bits = 8;   // velocity / ADAM moments
    int acc_bits = 16;    // accumulator width n
    int acc_overlap = 4;  // k: accumulator bits overlapping the parameter's low bits
    int zero_exponent = kDefaultZeroExponent;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must be in [0, 1)");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw Error("beta1 must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw Error("beta2 must be in [0, 1)");
        if (!(epsilon > 0.0)) throw Error("epsilon must be > 0");
        check_bit_width(state_bits);
        check_bit_width(acc_bits);
        if (acc_overlap < 0 || acc_overlap > acc_bits - 1) throw Error("acc_overlap must be in 0..acc_bits-1");
    }
};

/// Parameter plus its lazy-update accumulator.
struct KahanParam {
    QTensor theta;
    QTensor acc;
};

/// Accumulator grid pinned below the parameter grid: its top `overlap`
/// magnitude bits sit under the parameter's lowest bits.
inline FixedPointFormat accumulator_format(const FixedPointFormat& theta, int acc_bits, int overlap) {
    return {acc_bits, theta.exponent - (acc_bits - 1 - overlap)};
}

inline KahanParam make_kahan_param(QTensor theta, int acc_bits, int overlap) {
    if (acc_bits < theta.format.bit_width) throw Error("accumulator must be at least as wide as the parameter");
    KahanParam p;
    p.acc = QTensor(theta.shape, accumulator_format(theta.format, acc_bits, overlap));
    p.theta = std::move(theta);
    return p;
}

struct UpdateStats {
    std::uint64_t acc_saturations = 0;  // accumulator elements clamped while absorbing an update
    std::uint64_t acc_realignments = 0; // accumulators re-pinned after a parameter exponent change
};

namespace detail {

inline std::int32_t quantize_counting(double x, const FixedPointFormat& f, std::uint64_t& saturations) {
    const double scaled = std::ldexp(x, -f.exponent);
    if (scaled > static_cast<double>(f.max_code()) + 0.5 || scaled < static_cast<double>(f.min_code()) - 0.5) ++saturations;
    return static_cast<std::int32_t>(quantize_code(x, f));
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw Error(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

} // namespace detail

/// theta <- Q(theta - update) on a fresh exponent; the accumulator is not used.
inline void apply_update_plain(KahanParam& p, std::span<const double> update, const OptimizerConfig& cfg) {
    if (update.size() != p.theta.size()) throw Error("update: size mismatch");
    RealTensor candidate(p.theta.shape);
    for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] = p.theta.value(i) - update[i];
    p.theta = qt_quantize(candidate, p.theta.format.bit_width, cfg.zero_exponent);
}

/// Four-line Kahan update, each intermediate rounded onto its owner's grid:
///   acc <- acc + update;  theta' = theta - acc;  acc <- acc + (theta' - theta);  theta <- theta'
/// theta' takes a fresh exponent, and acc is re-pinned to it in the third line.
inline void apply_update_lazy(KahanParam& p, std::span<const double> update, const OptimizerConfig& cfg,
                              UpdateStats* stats = nullptr) {
    const std::size_t n = p.theta.size();
    if (update.size() != n || p.acc.size() != n) throw Error("update: size mismatch");
    UpdateStats local;
    UpdateStats& st = stats ? *stats : local;

    const int acc_bits = p.acc.format.bit_width;
    const FixedPointFormat acc_fmt = accumulator_format(p.theta.format, acc_bits, cfg.acc_overlap);
    if (p.acc.format != acc_fmt) {
        p.acc = quantize_with(dequantize(p.acc), acc_fmt);
        ++st.acc_realignments;
    }

    std::vector<double> acc(n);
    for (std::size_t i = 0; i < n; ++i)
        acc[i] = dequantize_code(detail::quantize_counting(p.acc.value(i) + update[i], acc_fmt, st.acc_saturations),
                                 acc_fmt.exponent);

    RealTensor candidate(p.theta.shape);
    for (std::size_t i = 0; i < n; ++i) candidate[i] = p.theta.value(i) - acc[i];
    QTensor theta_next = qt_quantize(candidate, p.theta.format.bit_width, cfg.zero_exponent);

    const FixedPointFormat next_acc_fmt = accumulator_format(theta_next.format, acc_bits, cfg.acc_overlap);
    if (next_acc_fmt != acc_fmt) ++st.acc_realignments;
    QTensor acc_next(p.theta.shape, next_acc_fmt);
    for (std::size_t i = 0; i < n; ++i)
        acc_next.codes[i] = detail::quantize_counting(acc[i] + (theta_next.value(i) - p.theta.value(i)), next_acc_fmt,
                                                      st.acc_saturations);

    p.theta = std::move(theta_next);
    p.acc = std::move(acc_next);
}

inline void apply_update(KahanParam& p, std::span<const double> update, const OptimizerConfig& cfg, UpdateStats* stats) {
    if (cfg.lazy)
        apply_update_lazy(p, update, cfg, stats);
    else
        apply_update_plain(p, update, cfg);
}

namespace detail {

inline std::vector<double> scaled_gradient(const QTensor& grad, double lr) {
    std::vector<double> u(grad.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = lr * grad.value(i);
    return u;
}

} // namespace detail

inline void sgd_step_plain(KahanParam& p, const QTensor& grad, const OptimizerConfig& cfg) {
    detail::check_same_shape(p.theta.shape, grad.shape, "sgd");
    apply_update_plain(p, detail::scaled_gradient(grad, cfg.learning_rate), cfg);
}

inline void sgd_step_lazy(KahanParam& p, const QTensor& grad, const OptimizerConfig& cfg, UpdateStats* stats = nullptr) {
    detail::check_same_shape(p.theta.shape, grad.shape, "sgd");
    apply_update_lazy(p, detail::scaled_gradient(grad, cfg.learning_rate), cfg, stats);
}

/// v <- mu*v + lr*g at state precision, then theta <- theta - v (plain or lazy).
inline void momentum_step(KahanParam& p, const QTensor& grad, QTensor& velocity, const OptimizerConfig& cfg,
                          UpdateStats* stats = nullptr) {
    detail::check_same_shape(p.theta.shape, grad.shape, "momentum");
    detail::check_same_shape(velocity.shape, grad.shape, "momentum velocity");
    RealTensor v(grad.shape);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = cfg.momentum * velocity.value(i) + cfg.learning_rate * grad.value(i);
    velocity = qt_quantize(v, cfg.state_bits, cfg.zero_exponent);
    const RealTensor update = dequantize(velocity);
    apply_update(p, update.values, cfg, stats);
}

struct AdamState {
    QTensor m;
    QTensor v;
    std::uint64_t step = 0;
};

inline AdamState make_adam_state(const Shape& shape, const OptimizerConfig& cfg) {
    return {QTensor(shape, {cfg.state_bits, cfg.zero_exponent}), QTensor(shape, {cfg.state_bits, cfg.zero_exponent}), 0};
}

/// Moments in real arithmetic on the dequantized state, stored back at
/// state_bits; the bias-corrected step goes through plain or lazy application.
inline void adam_step(KahanParam& p, const QTensor& grad, AdamState& state, const OptimizerConfig& cfg,
                      UpdateStats* stats = nullptr) {
    detail::check_same_shape(p.theta.shape, grad.shape, "adam");
    detail::check_same_shape(state.m.shape, grad.shape, "adam moment");
    detail::check_same_shape(state.v.shape, grad.shape, "adam moment");
    ++state.step;
    RealTensor m(grad.shape), v(grad.shape);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double g = grad.value(i);
        m[i] = cfg.beta1 * state.m.value(i) + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * state.v.value(i) + (1.0 - cfg.beta2) * g * g;
    }
    state.m = qt_quantize(m, cfg.state_bits, cfg.zero_exponent);
    state.v = qt_quantize(v, cfg.state_bits, cfg.zero_exponent);

    const auto t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    std::vector<double> update(m.size());
    for (std::size_t i = 0; i < update.size(); ++i) {
        const double mhat = state.m.value(i) / c1;
        const double vhat = state.v.value(i) / c2;
        update[i] = cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
    apply_update(p, update, cfg, stats);
}

// ---------------------------------------------------------------- generic per-tensor state

struct QOptimizerState {
    QTensor velocity;
    AdamState adam;
};

inline QOptimizerState make_optimizer_state(const KahanParam& p, const OptimizerConfig& cfg) {
    QOptimizerState s;
    s.velocity = QTensor(p.theta.shape, {cfg.state_bits, cfg.zero_exponent});
    s.adam = make_adam_state(p.theta.shape, cfg);
    return s;
}

inline void optimizer_step(KahanParam& p, const QTensor& grad, QOptimizerState& s, const OptimizerConfig& cfg,
                           UpdateStats* stats = nullptr) {
    switch (cfg.kind) {
    case OptimizerKind::sgd:
        if (cfg.lazy)
            sgd_step_lazy(p, grad, cfg, stats);
        else
            sgd_step_plain(p, grad, cfg);
        return;
    case OptimizerKind::momentum: momentum_step(p, grad, s.velocity, cfg, stats); return;
    case OptimizerKind::adam: adam_step(p, grad, s.adam, cfg, stats); return;
    }
}

// Full-precision reference optimizer: same recurrences in double.
struct ROptimizerState {
    RealTensor velocity;
    RealTensor m;
    RealTensor v;
    std::uint64_t step = 0;
};

inline ROptimizerState make_optimizer_state(const RealTensor& p, const OptimizerConfig&) {
    return {RealTensor(p.shape), RealTensor(p.shape), RealTensor(p.shape), 0};
}

inline void optimizer_step(RealTensor& p, const RealTensor& grad, ROptimizerState& s, const OptimizerConfig& cfg,
                           UpdateStats* = nullptr) {
    detail::check_same_shape(p.shape, grad.shape, "optimizer");
    const double lr = cfg.learning_rate;
    switch (cfg.kind) {
    case OptimizerKind::sgd:
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
        return;
    case OptimizerKind::momentum:
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.velocity[i] = cfg.momentum * s.velocity[i] + lr * grad[i];
            p[i] -= s.velocity[i];
        }
        return;
    case OptimizerKind::adam: {
        ++s.step;
        const auto t = static_cast<double>(s.step);
        const double c1 = 1.0 - std::pow(cfg.beta1, t);
        const double c2 = 1.0 - std::pow(cfg.beta2, t);
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * grad[i];
            s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg.epsilon);
        }
        return;
    }
    }
}

/// Step decay: lr * factor^(floor(step / interval)); interval 0 disables it.
inline double scheduled_learning_rate(double base, double factor, std::uint64_t interval, std::uint64_t step) {
    if (interval == 0) return base;
    return base * std::pow(factor, static_cast<double>(step / interval));
}

} // namespace lbt
