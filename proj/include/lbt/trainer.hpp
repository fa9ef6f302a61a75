// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "nn.hpp"
#include "optim.hpp"

namespace lbt {

struct MetricsRecord {
    std::string kind = "step"; // step | epoch
    std::uint64_t step = 0;
    int epoch = 0;
    double learning_rate = 0.0;
    double train_loss = 0.0;
    std::optional<double> eval_accuracy;
    std::uint64_t acc_saturation_count = 0;
    double zeroed_gradient_fraction = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "kind,step,epoch,learning_rate,train_loss,eval_accuracy,acc_saturation_count,zeroed_gradient_fraction";

inline std::string metrics_row(const MetricsRecord& m) {
    char buf[256];
    char acc[32] = "";
    if (m.eval_accuracy) std::snprintf(acc, sizeof acc, "%.6f", *m.eval_accuracy);
    std::snprintf(buf, sizeof buf, "%s,%llu,%d,%.9g,%.9g,%s,%llu,%.6f", m.kind.c_str(), static_cast<unsigned long long>(m.step),
                  m.epoch, m.learning_rate, m.train_loss, acc, static_cast<unsigned long long>(m.acc_saturation_count),
                  m.zeroed_gradient_fraction);
    return buf;
}

struct TrainResult {
    MetricsRecord final_metrics;
    std::optional<double> final_accuracy;
    std::filesystem::path checkpoint;
    std::filesystem::path metrics;
    bool stopped_early = false;
};

/// Counters that must survive a checkpoint for resumed runs to match.
struct TrainerState {
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    std::uint64_t position = 0; // next sample offset in this epoch's permutation
    std::uint64_t saturations = 0;
    double window_loss = 0.0;
    double window_zeroed = 0.0;
    std::uint64_t window_steps = 0;
    std::uint64_t window_saturations = 0;
    double epoch_loss = 0.0;
    double epoch_zeroed = 0.0;
    std::uint64_t epoch_steps = 0;
    std::uint64_t epoch_saturations = 0;
    double best_accuracy = -1.0;
    double last_accuracy = -1.0;

    static constexpr std::size_t kEncodedSize = 14 * 8;

    std::vector<std::uint8_t> encode() const {
        std::vector<std::uint8_t> b;
        for (std::uint64_t v : {step, epoch, position, saturations, std::bit_cast<std::uint64_t>(window_loss),
                                std::bit_cast<std::uint64_t>(window_zeroed), window_steps, window_saturations,
                                std::bit_cast<std::uint64_t>(epoch_loss), std::bit_cast<std::uint64_t>(epoch_zeroed), epoch_steps,
                                epoch_saturations, std::bit_cast<std::uint64_t>(best_accuracy),
                                std::bit_cast<std::uint64_t>(last_accuracy)})
            TensorRecord::put_le(b, v);
        return b;
    }
    static TrainerState decode(const std::vector<std::uint8_t>& b) {
        if (b.size() != kEncodedSize) throw Error("checkpoint: truncated record (trainer state)");
        auto u = [&](int i) { return TensorRecord::get_le<std::uint64_t>(b, static_cast<std::size_t>(i) * 8); };
        TrainerState s;
        s.step = u(0);
        s.epoch = u(1);
        s.position = u(2);
        s.saturations = u(3);
        s.window_loss = std::bit_cast<double>(u(4));
        s.window_zeroed = std::bit_cast<double>(u(5));
        s.window_steps = u(6);
        s.window_saturations = u(7);
        s.epoch_loss = std::bit_cast<double>(u(8));
        s.epoch_zeroed = std::bit_cast<double>(u(9));
        s.epoch_steps = u(10);
        s.epoch_saturations = u(11);
        s.best_accuracy = std::bit_cast<double>(u(12));
        s.last_accuracy = std::bit_cast<double>(u(13));
        return s;
    }
};

struct Datasets {
    Dataset train;
    Dataset eval;
};

inline Datasets load_datasets(const RunConfig& cfg) {
    Datasets d;
    if (cfg.dataset == "blobs") {
        const std::size_t per = cfg.blobs_per_class + cfg.blobs_test_per_class;
        const Dataset all = synth_blobs(cfg.blobs_classes, per, cfg.blobs_dim, cfg.blobs_spread, cfg.blobs_seed);
        if (cfg.blobs_test_per_class == 0) {
            d.train = all;
        } else {
            // class-major layout: the first blobs_per_class of each class train, the rest evaluate
            std::vector<std::size_t> tr, te;
            for (std::size_t i = 0; i < all.size(); ++i) (i % per < cfg.blobs_per_class ? tr : te).push_back(i);
            auto pick = [&](const std::vector<std::size_t>& idx) {
                Dataset s;
                s.num_classes = all.num_classes;
                s.images = all.batch_images(idx);
                s.labels = all.batch_labels(idx);
                return s;
            };
            d.train = pick(tr);
            d.eval = pick(te);
        }
    } else {
        const auto train_labels = cfg.train_labels.empty() ? sibling_labels_path(cfg.train_images) : std::filesystem::path(cfg.train_labels);
        d.train = load_idx_dataset(cfg.train_images, train_labels).head(cfg.train_limit);
        if (!cfg.test_images.empty()) {
            const auto labels = cfg.test_labels.empty() ? sibling_labels_path(cfg.test_images) : std::filesystem::path(cfg.test_labels);
            d.eval = load_idx_dataset(cfg.test_images, labels).head(cfg.test_limit);
        }
    }
    if (d.eval.size() == 0) d.eval = d.train;
    return d;
}

/// Shuffled sample order for one epoch, a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(epoch),
                      0x5eedu};
    std::mt19937_64 rng(seq);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

template <class Backend>
Backend make_backend(const RunConfig& cfg) {
    if constexpr (std::is_same_v<Backend, QuantBackend>)
        return QuantBackend{cfg.optimizer.acc_bits, cfg.optimizer.acc_overlap, cfg.zero_exponent};
    else
        return RealBackend{};
}

/// Network plus optimizer state for one run.
template <class Backend>
struct Model {
    using Net = Network<Backend>;
    Net net;
    std::vector<typename Backend::OptState> states; // two per parameterized layer: weight, bias

    Model(const RunConfig& cfg, const Shape& input, int num_classes)
        : net(build_layers(cfg, input, num_classes), input, cfg.seed, make_backend<Backend>(cfg)) {
        for (const auto& p : net.params()) {
            states.push_back(make_optimizer_state(p.weight, cfg.optimizer));
            states.push_back(make_optimizer_state(p.bias, cfg.optimizer));
        }
    }
};

template <class Backend>
double evaluate(const Network<Backend>& net, const Dataset& data, std::size_t batch = 256) {
    if (data.size() == 0) throw Error("evaluate: empty dataset");
    if (data.sample_shape() != net.input_shape())
        throw Error("evaluate: data shape " + shape_str(data.sample_shape()) + " does not match network input " + shape_str(net.input_shape()));
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
        const auto logits = Backend::to_real(net.forward(net.quantize_input(data.batch_images(idx))));
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------- checkpoint mapping

namespace detail {

inline void put_param(Checkpoint& ck, Role role, Role acc_role, std::uint32_t i, const KahanParam& p) {
    ck.records.push_back(TensorRecord::from(role, i, p.theta));
    ck.records.push_back(TensorRecord::from(acc_role, i, p.acc));
}
inline void put_param(Checkpoint& ck, Role role, Role, std::uint32_t i, const RealTensor& p) {
    ck.records.push_back(TensorRecord::from(role, i, p));
}
inline void get_param(const Checkpoint& ck, Role role, Role acc_role, std::uint32_t i, KahanParam& p) {
    p.theta = ck.get(role, i).to_qtensor();
    p.acc = ck.get(acc_role, i).to_qtensor();
}
inline void get_param(const Checkpoint& ck, Role role, Role, std::uint32_t i, RealTensor& p) { p = ck.get(role, i).to_real(); }

inline void put_state(Checkpoint& ck, Role vel, Role m, Role v, std::uint32_t i, const QOptimizerState& s) {
    ck.records.push_back(TensorRecord::from(vel, i, s.velocity));
    ck.records.push_back(TensorRecord::from(m, i, s.adam.m));
    ck.records.push_back(TensorRecord::from(v, i, s.adam.v));
}
inline void put_state(Checkpoint& ck, Role vel, Role m, Role v, std::uint32_t i, const ROptimizerState& s) {
    ck.records.push_back(TensorRecord::from(vel, i, s.velocity));
    ck.records.push_back(TensorRecord::from(m, i, s.m));
    ck.records.push_back(TensorRecord::from(v, i, s.v));
}
inline void get_state(const Checkpoint& ck, Role vel, Role m, Role v, std::uint32_t i, QOptimizerState& s) {
    s.velocity = ck.get(vel, i).to_qtensor();
    s.adam.m = ck.get(m, i).to_qtensor();
    s.adam.v = ck.get(v, i).to_qtensor();
}
inline void get_state(const Checkpoint& ck, Role vel, Role m, Role v, std::uint32_t i, ROptimizerState& s) {
    s.velocity = ck.get(vel, i).to_real();
    s.m = ck.get(m, i).to_real();
    s.v = ck.get(v, i).to_real();
}

inline std::uint64_t& adam_steps(QOptimizerState& s) { return s.adam.step; }
inline std::uint64_t& adam_steps(ROptimizerState& s) { return s.step; }

} // namespace detail

template <class Backend>
Checkpoint make_checkpoint(const RunConfig& cfg, Model<Backend>& model, const TrainerState& st) {
    Checkpoint ck;
    // invocation controls are left out so a resumed run saves the same bytes as an unbroken one
    RunConfig stored = cfg;
    stored.output_dir.clear();
    stored.resume.clear();
    stored.max_steps = 0;
    const std::string text = stored.to_text();
    ck.records.push_back(TensorRecord::bytes(Role::config_text, 0, std::vector<std::uint8_t>(text.begin(), text.end())));
    auto state = st.encode();
    for (auto& s : model.states) TensorRecord::put_le(state, detail::adam_steps(s));
    ck.records.push_back(TensorRecord::bytes(Role::trainer_state, 0, std::move(state)));
    auto& params = model.net.params();
    for (std::uint32_t i = 0; i < params.size(); ++i) {
        detail::put_param(ck, Role::weight, Role::weight_acc, i, params[i].weight);
        detail::put_param(ck, Role::bias, Role::bias_acc, i, params[i].bias);
        detail::put_state(ck, Role::weight_velocity, Role::weight_adam_m, Role::weight_adam_v, i, model.states[2 * i]);
        detail::put_state(ck, Role::bias_velocity, Role::bias_adam_m, Role::bias_adam_v, i, model.states[2 * i + 1]);
    }
    return ck;
}

template <class Backend>
TrainerState restore_checkpoint(const Checkpoint& ck, Model<Backend>& model) {
    auto& params = model.net.params();
    for (std::uint32_t i = 0; i < params.size(); ++i) {
        auto check = [&](const auto& loaded, const auto& current) {
            if (Backend::value(loaded).shape != Backend::value(current).shape)
                throw Error("checkpoint parameter " + std::to_string(i) + " does not match the network geometry");
        };
        auto w = params[i].weight;
        auto b = params[i].bias;
        detail::get_param(ck, Role::weight, Role::weight_acc, i, w);
        detail::get_param(ck, Role::bias, Role::bias_acc, i, b);
        check(w, params[i].weight);
        check(b, params[i].bias);
        params[i].weight = std::move(w);
        params[i].bias = std::move(b);
        detail::get_state(ck, Role::weight_velocity, Role::weight_adam_m, Role::weight_adam_v, i, model.states[2 * i]);
        detail::get_state(ck, Role::bias_velocity, Role::bias_adam_m, Role::bias_adam_v, i, model.states[2 * i + 1]);
    }
    const auto& raw = ck.get(Role::trainer_state).payload;
    constexpr std::size_t head = TrainerState::kEncodedSize;
    if (raw.size() != head + 8 * model.states.size()) throw Error("checkpoint: truncated record (trainer state)");
    const TrainerState st = TrainerState::decode(std::vector<std::uint8_t>(raw.begin(), raw.begin() + head));
    for (std::size_t k = 0; k < model.states.size(); ++k)
        detail::adam_steps(model.states[k]) = TensorRecord::get_le<std::uint64_t>(raw, head + 8 * k);
    return st;
}

inline RunConfig checkpoint_config(const Checkpoint& ck) {
    const auto& raw = ck.get(Role::config_text).payload;
    return parse_config(std::string(raw.begin(), raw.end()), "checkpoint config");
}

// ---------------------------------------------------------------- training loop

template <class Backend>
TrainResult run_training(const RunConfig& cfg, const Datasets& data) {
    namespace fs = std::filesystem;
    using Tensor = typename Backend::Tensor;

    Model<Backend> model(cfg, data.train.sample_shape(), data.train.num_classes);
    auto& net = model.net;
    TrainerState st;
    if (!cfg.resume.empty()) st = restore_checkpoint(Checkpoint::load(cfg.resume), model);

    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    TrainResult result;
    result.metrics = out_dir / "metrics.csv";
    const bool append = !cfg.resume.empty() && fs::exists(result.metrics);
    std::ofstream metrics(result.metrics, append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw Error("cannot write " + result.metrics.string());
    if (!append) metrics << kMetricsHeader << '\n';

    const std::size_t n = data.train.size();
    const std::size_t classes = static_cast<std::size_t>(data.train.num_classes);
    const int grad_bits = net.classifier_gradient_bits();
    UpdateStats stats;

    auto save = [&](const fs::path& p) { make_checkpoint(cfg, model, st).save(p); };
    auto last_acc = [&]() -> std::optional<double> {
        return st.last_accuracy >= 0 ? std::optional<double>(st.last_accuracy) : std::nullopt;
    };

    while (st.epoch < static_cast<std::uint64_t>(cfg.epochs)) {
        const auto perm = epoch_permutation(n, cfg.seed, st.epoch);
        while (st.position < n) {
            const std::size_t end = std::min<std::size_t>(n, st.position + cfg.batch_size);
            const std::span<const std::size_t> idx(perm.data() + st.position, end - st.position);
            const RealTensor targets = one_hot(data.train.batch_labels(idx), classes);

            ForwardCache<Tensor> cache;
            const Tensor logits = net.forward(net.quantize_input(data.train.batch_images(idx)), &cache);
            const auto sm = softmax_xent_forward(Backend::to_real(logits), targets);
            if (!std::isfinite(sm.loss))
                throw Error("non-finite loss at step " + std::to_string(st.step) + " (epoch " + std::to_string(st.epoch) + ")");
            const Tensor grad = net.backend().from_real(softmax_xent_grad(sm.probs, targets), grad_bits);
            double zeroed = 0.0;
            if constexpr (std::is_same_v<Tensor, QTensor>) zeroed = zeroed_fraction(grad, targets);
            const auto grads = net.backward(cache, grad);

            OptimizerConfig step_cfg = cfg.optimizer;
            step_cfg.learning_rate = scheduled_learning_rate(cfg.optimizer.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_interval, st.step);
            const std::uint64_t sat_before = stats.acc_saturations;
            auto& params = net.params();
            for (std::size_t i = 0; i < params.size(); ++i) {
                optimizer_step(params[i].weight, grads[i].weight, model.states[2 * i], step_cfg, &stats);
                optimizer_step(params[i].bias, grads[i].bias, model.states[2 * i + 1], step_cfg, &stats);
            }
            const std::uint64_t sat = stats.acc_saturations - sat_before;

            ++st.step;
            st.position = end;
            st.saturations += sat;
            st.window_loss += sm.loss;
            st.window_zeroed += zeroed;
            st.window_saturations += sat;
            ++st.window_steps;
            st.epoch_loss += sm.loss;
            st.epoch_zeroed += zeroed;
            st.epoch_saturations += sat;
            ++st.epoch_steps;

            if (cfg.log_interval && st.step % cfg.log_interval == 0) {
                MetricsRecord m{"step", st.step, static_cast<int>(st.epoch), step_cfg.learning_rate,
                                st.window_loss / static_cast<double>(st.window_steps), last_acc(), st.window_saturations,
                                st.window_zeroed / static_cast<double>(st.window_steps)};
                metrics << metrics_row(m) << '\n';
                result.final_metrics = m;
                st.window_loss = st.window_zeroed = 0.0;
                st.window_steps = st.window_saturations = 0;
            }
            if (cfg.max_steps && st.step >= cfg.max_steps) {
                result.checkpoint = out_dir / "final.lbt";
                save(result.checkpoint);
                result.stopped_early = true;
                result.final_accuracy = last_acc();
                return result;
            }
        }
        const double acc = evaluate(net, data.eval);
        st.last_accuracy = acc;
        ++st.epoch;
        st.position = 0;
        // epoch rows summarize the whole epoch
        const auto denom = static_cast<double>(std::max<std::uint64_t>(st.epoch_steps, 1));
        MetricsRecord m{"epoch", st.step, static_cast<int>(st.epoch),
                        scheduled_learning_rate(cfg.optimizer.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_interval, st.step),
                        st.epoch_loss / denom, acc, st.epoch_saturations, st.epoch_zeroed / denom};
        st.epoch_loss = st.epoch_zeroed = 0.0;
        st.epoch_steps = st.epoch_saturations = 0;
        metrics << metrics_row(m) << '\n';
        metrics.flush();
        result.final_metrics = m;
        if (acc > st.best_accuracy) {
            st.best_accuracy = acc;
            save(out_dir / "best.lbt");
        }
    }
    result.checkpoint = out_dir / "final.lbt";
    save(result.checkpoint);
    result.final_accuracy = st.last_accuracy;
    return result;
}

inline TrainResult train(const RunConfig& cfg, const Datasets& data) {
    cfg.validate();
    if (cfg.mode == Mode::fp_reference) return run_training<RealBackend>(cfg, data);
    return run_training<QuantBackend>(cfg, data);
}

inline TrainResult train(const RunConfig& cfg) {
    cfg.validate();
    return train(cfg, load_datasets(cfg));
}

/// Output width of the last parameterized layer.
inline int checkpoint_num_classes(const Checkpoint& ck) {
    std::uint32_t last = 0;
    bool any = false;
    for (const auto& r : ck.records)
        if (r.role == Role::bias) {
            last = std::max(last, r.index);
            any = true;
        }
    if (!any) throw Error("checkpoint has no parameter records");
    return static_cast<int>(shape_size(ck.get(Role::bias, last).shape));
}

/// Accuracy of a saved checkpoint on `data`, using the checkpoint's own numeric mode.
inline double evaluate_checkpoint(const std::filesystem::path& path, const Dataset& data) {
    const Checkpoint ck = Checkpoint::load(path);
    const RunConfig cfg = checkpoint_config(ck);
    const int classes = checkpoint_num_classes(ck);
    for (int l : data.labels)
        if (l < 0 || l >= classes) throw Error("label " + std::to_string(l) + " outside the checkpoint's " + std::to_string(classes) + " classes");
    if (cfg.mode == Mode::fp_reference) {
        Model<RealBackend> model(cfg, data.sample_shape(), classes);
        restore_checkpoint(ck, model);
        return evaluate(model.net, data);
    }
    Model<QuantBackend> model(cfg, data.sample_shape(), classes);
    restore_checkpoint(ck, model);
    return evaluate(model.net, data);
}

} // namespace lbt
