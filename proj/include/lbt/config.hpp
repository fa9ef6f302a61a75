// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment definition. Text form: one `key = value` per line, `#` starts a
// comment, unknown keys are errors.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "nn.hpp"
#include "optim.hpp"

namespace lbt {

enum class Mode { fp_reference, quantized };

struct RunConfig {
    Mode mode = Mode::quantized;
    int weight_bits = 8;
    int activation_bits = 8;
    int gradient_bits = 8;
    // last fully-connected layer; 0 inherits the global width
    int classifier_weight_bits = 0;
    int classifier_activation_bits = 0;
    int classifier_gradient_bits = 0;
    int zero_exponent = kDefaultZeroExponent;

    OptimizerConfig optimizer;
    double lr_decay_factor = 1.0;
    std::uint64_t lr_decay_interval = 0;

    int epochs = 1;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    std::string architecture = "lenet"; // lenet | mlp | linear
    std::size_t hidden = 100;

    std::string dataset = "mnist"; // mnist | blobs
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t train_limit = 0;
    std::size_t test_limit = 0;
    int blobs_classes = 10;
    std::size_t blobs_per_class = 100;
    std::size_t blobs_test_per_class = 0; // 0: evaluate on the training set
    std::size_t blobs_dim = 16;
    double blobs_spread = 3.0;
    std::uint64_t blobs_seed = 7;

    std::string output_dir = "run";
    std::size_t log_interval = 100;
    std::uint64_t max_steps = 0; // stop (and checkpoint) after this many updates; 0 = run all epochs
    std::string resume;          // checkpoint to continue from

    void validate() const;
    void set(const std::string& key, const std::string& value);
    std::string to_text() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw Error("invalid value '" + v + "' for " + key);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error("invalid boolean '" + v + "' for " + key);
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct Field {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number_field(T RunConfig::*m) {
    return {[m](RunConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) { c.*m = parse_number<T>(k, v); },
            [m](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>)
                    return fmt_double(c.*m);
                else
                    return std::to_string(c.*m);
            }};
}

template <class T>
Field opt_number_field(T OptimizerConfig::*m) {
    return {[m](RunConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) { c.optimizer.*m = parse_number<T>(k, v); },
            [m](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>)
                    return fmt_double(c.optimizer.*m);
                else
                    return std::to_string(c.optimizer.*m);
            }};
}

inline Field string_field(std::string RunConfig::*m) {
    return {[m](RunConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) { c.*m = v; }, [m](const RunConfig& c) { return c.*m; }};
}

inline const std::vector<std::pair<std::string, Field>>& config_fields() {
    static const std::vector<std::pair<std::string, Field>> fields = {
        {"mode",
         {[](RunConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) {
              if (v == "fp_reference")
                  c.mode = Mode::fp_reference;
              else if (v == "quantized")
                  c.mode = Mode::quantized;
              else
                  throw Error("invalid value '" + v + "' for mode (fp_reference | quantized)");
          },
          [](const RunConfig& c) { return std::string(c.mode == Mode::fp_reference ? "fp_reference" : "quantized"); }}},
        {"weight_bits", number_field(&RunConfig::weight_bits)},
        {"activation_bits", number_field(&RunConfig::activation_bits)},
        {"gradient_bits", number_field(&RunConfig::gradient_bits)},
        {"classifier_weight_bits", number_field(&RunConfig::classifier_weight_bits)},
        {"classifier_activation_bits", number_field(&RunConfig::classifier_activation_bits)},
        {"classifier_gradient_bits", number_field(&RunConfig::classifier_gradient_bits)},
        {"zero_exponent", number_field(&RunConfig::zero_exponent)},
        {"optimizer",
         {[](RunConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) { c.optimizer.kind = parse_optimizer_kind(v); },
          [](const RunConfig& c) { return to_string(c.optimizer.kind); }}},
        {"learning_rate", opt_number_field(&OptimizerConfig::learning_rate)},
        {"momentum", opt_number_field(&OptimizerConfig::momentum)},
        {"beta1", opt_number_field(&OptimizerConfig::beta1)},
        {"beta2", opt_number_field(&OptimizerConfig::beta2)},
        {"epsilon", opt_number_field(&OptimizerConfig::epsilon)},
        {"lazy",
         {[](RunConfig& c, [[maybe_unused]] const std::string& k, const std::string& v) { c.optimizer.lazy = parse_bool(k, v); },
          [](const RunConfig& c) { return std::string(c.optimizer.lazy ? "true" : "false"); }}},
        {"state_bits", opt_number_field(&OptimizerConfig::state_bits)},
        {"acc_bits", opt_number_field(&OptimizerConfig::acc_bits)},
        {"acc_overlap", opt_number_field(&OptimizerConfig::acc_overlap)},
        {"lr_decay_factor", number_field(&RunConfig::lr_decay_factor)},
        {"lr_decay_interval", number_field(&RunConfig::lr_decay_interval)},
        {"epochs", number_field(&RunConfig::epochs)},
        {"batch_size", number_field(&RunConfig::batch_size)},
        {"seed", number_field(&RunConfig::seed)},
        {"architecture", string_field(&RunConfig::architecture)},
        {"hidden", number_field(&RunConfig::hidden)},
        {"dataset", string_field(&RunConfig::dataset)},
        {"train_images", string_field(&RunConfig::train_images)},
        {"train_labels", string_field(&RunConfig::train_labels)},
        {"test_images", string_field(&RunConfig::test_images)},
        {"test_labels", string_field(&RunConfig::test_labels)},
        {"train_limit", number_field(&RunConfig::train_limit)},
        {"test_limit", number_field(&RunConfig::test_limit)},
        {"blobs_classes", number_field(&RunConfig::blobs_classes)},
        {"blobs_per_class", number_field(&RunConfig::blobs_per_class)},
        {"blobs_test_per_class", number_field(&RunConfig::blobs_test_per_class)},
        {"blobs_dim", number_field(&RunConfig::blobs_dim)},
        {"blobs_spread", number_field(&RunConfig::blobs_spread)},
        {"blobs_seed", number_field(&RunConfig::blobs_seed)},
        {"output_dir", string_field(&RunConfig::output_dir)},
        {"log_interval", number_field(&RunConfig::log_interval)},
        {"max_steps", number_field(&RunConfig::max_steps)},
        {"resume", string_field(&RunConfig::resume)},
    };
    return fields;
}

} // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& [name, field] : detail::config_fields()) {
        if (name != key) continue;
        field.set(*this, key, value);
        return;
    }
    throw Error("unknown config key '" + key + "'");
}

inline std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [name, field] : detail::config_fields()) out += name + " = " + field.get(*this) + "\n";
    return out;
}

inline void RunConfig::validate() const {
    for (int b : {weight_bits, activation_bits, gradient_bits}) check_bit_width(b);
    for (int b : {classifier_weight_bits, classifier_activation_bits, classifier_gradient_bits})
        if (b != 0) check_bit_width(b);
    optimizer.validate();
    if (optimizer.acc_bits < weight_bits || (classifier_weight_bits && optimizer.acc_bits < classifier_weight_bits))
        throw Error("acc_bits must be >= the parameter bit width");
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (!(lr_decay_factor > 0.0)) throw Error("lr_decay_factor must be > 0");
    if (architecture != "lenet" && architecture != "mlp" && architecture != "linear")
        throw Error("unknown architecture '" + architecture + "' (lenet | mlp | linear)");
    if (dataset == "mnist") {
        if (train_images.empty()) throw Error("mnist dataset needs train_images");
    } else if (dataset == "blobs") {
        if (blobs_classes < 2 || blobs_per_class < 1 || blobs_dim < 1) throw Error("blobs dataset needs positive counts");
    } else {
        throw Error("unknown dataset '" + dataset + "' (mnist | blobs)");
    }
}

/// Apply `key = value` lines. Relative paths in values stay as written.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source = "config") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error(source + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const Error& e) {
            throw Error(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
    RunConfig cfg;
    apply_config_text(cfg, text, source);
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

/// `key=value` from the command line.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("override '" + kv + "' is not key=value");
    cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

/// Layer list for the configured architecture, bit widths applied.
inline std::vector<LayerSpec> build_layers(const RunConfig& cfg, const Shape& input, int num_classes) {
    std::vector<LayerSpec> layers;
    const auto classes = static_cast<std::size_t>(num_classes);
    const std::size_t features = shape_size(input);
    if (cfg.architecture == "lenet") {
        if (input.size() != 3) throw Error("lenet needs C x H x W input");
        layers = {LayerSpec::conv(input[0], 8, 5), LayerSpec::relu(), LayerSpec::max_pool(),
                  LayerSpec::conv(8, 16, 5),       LayerSpec::relu(), LayerSpec::max_pool()};
        const auto shapes = infer_shapes(layers, input);
        layers.push_back(LayerSpec::fc(shape_size(shapes.back()), cfg.hidden));
        layers.push_back(LayerSpec::relu());
        layers.push_back(LayerSpec::fc(cfg.hidden, classes));
    } else if (cfg.architecture == "mlp") {
        layers = {LayerSpec::fc(features, cfg.hidden), LayerSpec::relu(), LayerSpec::fc(cfg.hidden, classes)};
    } else {
        layers = {LayerSpec::fc(features, classes)};
    }
    for (auto& l : layers) l.bits(cfg.weight_bits, cfg.activation_bits, cfg.gradient_bits);
    auto& last = layers.back();
    if (cfg.classifier_weight_bits) last.weight_bits = cfg.classifier_weight_bits;
    if (cfg.classifier_activation_bits) last.activation_bits = cfg.classifier_activation_bits;
    if (cfg.classifier_gradient_bits) last.gradient_bits = cfg.classifier_gradient_bits;
    return layers;
}

} // namespace lbt
