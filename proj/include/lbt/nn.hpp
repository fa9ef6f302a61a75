// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "optim.hpp"
#include "qops.hpp"
#include "rops.hpp"
#include "tensor.hpp"

namespace lbt {

enum class LayerKind { fully_connected, conv2d, relu, max_pool };

inline std::string to_string(LayerKind k) {
    switch (k) {
    case LayerKind::fully_connected: return "fc";
    case LayerKind::conv2d: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "maxpool";
    }
    return "?";
}

/// One layer and the bit widths of the tensors it owns. For fully_connected
/// `in`/`out` are feature counts; for conv2d they are channel counts.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    int weight_bits = 8;
    int activation_bits = 8;
    int gradient_bits = 8;

    bool has_params() const { return kind == LayerKind::fully_connected || kind == LayerKind::conv2d; }

    static LayerSpec fc(std::size_t in, std::size_t out) { return {LayerKind::fully_connected, in, out}; }
    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0) {
        return {LayerKind::conv2d, in, out, kernel, stride, pad};
    }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec max_pool() { return {LayerKind::max_pool}; }

    LayerSpec& bits(int weights, int activations, int gradients) {
        weight_bits = weights;
        activation_bits = activations;
        gradient_bits = gradients;
        return *this;
    }
};

// ---------------------------------------------------------------- backends


/// Integer path: every tensor crossing a layer boundary is a QTensor.
struct QuantBackend {
    using Tensor = QTensor;
    using Param = KahanParam;
    using OptState = QOptimizerState;

    int acc_bits = 16;
    int acc_overlap = 4;
    int zero_exponent = kDefaultZeroExponent;

    Tensor input(const RealTensor& x, int bits) const { return qt_quantize(x, bits, zero_exponent); }
    Param make_param(const RealTensor& init, int bits) const {
        return make_kahan_param(qt_quantize(init, bits, zero_exponent), std::max(acc_bits, bits), acc_overlap);
    }
    static const Tensor& value(const Param& p) { return p.theta; }
    static RealTensor to_real(const Tensor& t) { return dequantize(t); }
    Tensor from_real(const RealTensor& t, int bits) const { return qt_quantize(t, bits, zero_exponent); }
    Tensor rebits(const Tensor& t, int bits) const { return t.format.bit_width == bits ? t : requantize(t, bits, zero_exponent); }
    static Tensor reshape(Tensor t, Shape s) {
        if (shape_size(s) != t.size()) throw Error("reshape: element count mismatch");
        t.shape = std::move(s);
        return t;
    }

    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, int bits) const {
        return qt_add_bias(requantize(qt_matmul_nt_wide(x, w), bits, zero_exponent), b, bits, zero_exponent);
    }
    Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, const LayerSpec& l, int bits) const {
        return qt_add_bias(requantize(qt_conv2d_wide(x, w, l.stride, l.pad), bits, zero_exponent), b, bits, zero_exponent);
    }
    static Tensor relu(const Tensor& x) { return qt_relu(x); }
    static Tensor max_pool(const Tensor& x, std::vector<std::uint32_t>& argmax) { return qt_max_pool_2x2(x, &argmax); }
    static Tensor relu_backward(const Tensor& out, const Tensor& g) { return qt_relu_backward(out, g); }
    static Tensor max_pool_backward(const Tensor& g, const std::vector<std::uint32_t>& argmax, const Shape& s) {
        return qt_max_pool_backward(g, argmax, s);
    }

    struct Grads {
        Tensor input, weight, bias;
    };
    Grads linear_backward(const Tensor& x, const Tensor& w, const Tensor& g, int bits, bool need_input) const {
        return finish(qt_linear_backward_wide(x, w, g, need_input), bits, need_input);
    }
    Grads conv_backward(const Tensor& x, const Tensor& w, const Tensor& g, const LayerSpec& l, int bits, bool need_input) const {
        return finish(qt_conv2d_backward_wide(x, w, g, l.stride, l.pad, need_input), bits, need_input);
    }

private:
    Grads finish(const QLinearGrads& wide, int bits, bool need_input) const {
        Grads out;
        out.weight = requantize(wide.weight, bits, zero_exponent);
        out.bias = requantize(wide.bias, bits, zero_exponent);
        if (need_input) out.input = requantize(wide.input, bits, zero_exponent);
        return out;
    }
};

/// Full-precision path; bit widths are ignored.
struct RealBackend {
    using Tensor = RealTensor;
    using Param = RealTensor;
    using OptState = ROptimizerState;

    static Tensor input(const RealTensor& x, int) { return x; }
    static Param make_param(const RealTensor& init, int) { return init; }
    static const Tensor& value(const Param& p) { return p; }
    static RealTensor to_real(const Tensor& t) { return t; }
    static Tensor from_real(const RealTensor& t, int) { return t; }
    static Tensor rebits(const Tensor& t, int) { return t; }
    static Tensor reshape(Tensor t, Shape s) {
        if (shape_size(s) != t.size()) throw Error("reshape: element count mismatch");
        t.shape = std::move(s);
        return t;
    }

    static Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, int) { return rt_add_bias(rt_matmul_nt(x, w), b); }
    static Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, const LayerSpec& l, int) {
        return rt_add_bias(rt_conv2d(x, w, l.stride, l.pad), b);
    }
    static Tensor relu(const Tensor& x) { return rt_relu(x); }
    static Tensor max_pool(const Tensor& x, std::vector<std::uint32_t>& argmax) { return rt_max_pool_2x2(x, &argmax); }
    static Tensor relu_backward(const Tensor& out, const Tensor& g) { return rt_relu_backward(out, g); }
    static Tensor max_pool_backward(const Tensor& g, const std::vector<std::uint32_t>& argmax, const Shape& s) {
        return rt_max_pool_backward(g, argmax, s);
    }

    struct Grads {
        Tensor input, weight, bias;
    };
    static Grads linear_backward(const Tensor& x, const Tensor& w, const Tensor& g, int, bool need_input) {
        auto r = rt_linear_backward(x, w, g, need_input);
        return {std::move(r.input), std::move(r.weight), std::move(r.bias)};
    }
    static Grads conv_backward(const Tensor& x, const Tensor& w, const Tensor& g, const LayerSpec& l, int, bool need_input) {
        auto r = rt_conv2d_backward(x, w, g, l.stride, l.pad, need_input);
        return {std::move(r.input), std::move(r.weight), std::move(r.bias)};
    }
};

// ---------------------------------------------------------------- network

/// Output shape (without batch) of every layer for a C x H x W input.
inline std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& input) {
    std::vector<Shape> shapes;
    Shape cur = input;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
        for (int b : {l.weight_bits, l.activation_bits, l.gradient_bits})
            if (b < 2 || b > 32) throw Error(where + ": bit width " + std::to_string(b) + " outside 2..32");
        switch (l.kind) {
        case LayerKind::fully_connected:
            if (shape_size(cur) != l.in)
                throw Error(where + ": expects " + std::to_string(l.in) + " inputs, previous layer gives " + shape_str(cur));
            cur = {l.out};
            break;
        case LayerKind::conv2d: {
            if (cur.size() != 3 || cur[0] != l.in)
                throw Error(where + ": expects " + std::to_string(l.in) + " input channels, got " + shape_str(cur));
            kernels::ConvGeometry g{1, cur[0], cur[1], cur[2], l.out, l.kernel, l.kernel, l.stride, l.pad};
            g.check();
            cur = {l.out, g.out_h(), g.out_w()};
            break;
        }
        case LayerKind::relu: break;
        case LayerKind::max_pool:
            if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) throw Error(where + ": needs a C x H x W input of at least 2x2");
            cur = {cur[0], cur[1] / 2, cur[2] / 2};
            break;
        }
        shapes.push_back(cur);
    }
    return shapes;
}

template <class Tensor>
struct ForwardCache {
    const void* owner = nullptr;
    std::vector<Tensor> inputs;   // what each layer consumed (flattened for fc)
    std::vector<Shape> input_shapes; // before flattening
    std::vector<Tensor> outputs;
    std::vector<std::vector<std::uint32_t>> argmax;
};

template <class Backend>
class Network {
public:
    using Tensor = typename Backend::Tensor;
    using Param = typename Backend::Param;

    struct LayerParams {
        Param weight;
        Param bias;
    };
    struct LayerGrads {
        Tensor weight;
        Tensor bias;
    };

    /// Weights drawn uniform in +-sqrt(6 / (fan_in + fan_out)); biases start at 0.
    Network(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed, Backend backend = {})
        : layers_(std::move(layers)), input_shape_(std::move(input_shape)), backend_(backend) {
        if (layers_.empty()) throw Error("network has no layers");
        shapes_ = infer_shapes(layers_, input_shape_);
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            if (!l.has_params()) continue;
            Shape wshape;
            double fan_in = 0, fan_out = 0;
            if (l.kind == LayerKind::fully_connected) {
                wshape = {l.out, l.in};
                fan_in = static_cast<double>(l.in);
                fan_out = static_cast<double>(l.out);
            } else {
                wshape = {l.out, l.in, l.kernel, l.kernel};
                fan_in = static_cast<double>(l.in * l.kernel * l.kernel);
                fan_out = static_cast<double>(l.out * l.kernel * l.kernel);
            }
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            std::uniform_real_distribution<double> dist(-limit, limit);
            RealTensor w(wshape);
            for (auto& v : w.values) v = dist(rng);
            param_layers_.push_back(i);
            params_.push_back({backend_.make_param(w, l.weight_bits), backend_.make_param(RealTensor({l.out}), l.weight_bits)});
        }
    }

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const Shape& input_shape() const { return input_shape_; }
    const Backend& backend() const { return backend_; }
    std::size_t num_classes() const { return shape_size(shapes_.back()); }
    int input_bits() const { return layers_.front().activation_bits; }
    int classifier_gradient_bits() const { return layers_.back().gradient_bits; }

    /// Aligned 1:1 with the parameterized layers, in order.
    std::vector<LayerParams>& params() { return params_; }
    const std::vector<LayerParams>& params() const { return params_; }
    const std::vector<std::size_t>& param_layers() const { return param_layers_; }

    Tensor quantize_input(const RealTensor& x) const {
        Shape expect = input_shape_;
        expect.insert(expect.begin(), x.shape.empty() ? 0 : x.shape[0]);
        if (x.shape != expect) throw Error("input shape " + shape_str(x.shape) + " does not match network input " + shape_str(expect));
        return backend_.input(x, input_bits());
    }

    /// Logits (batch x classes); `cache` keeps what backward needs.
    Tensor forward(const Tensor& input, ForwardCache<Tensor>* cache = nullptr) const {
        Shape expect = input_shape_;
        expect.insert(expect.begin(), input.shape.empty() ? 0 : input.shape[0]);
        if (input.shape != expect)
            throw Error("input shape " + shape_str(input.shape) + " does not match network input " + shape_str(expect));
        const std::size_t batch = input.shape[0];
        if (cache) {
            cache->owner = this;
            cache->inputs.assign(layers_.size(), Tensor{});
            cache->input_shapes.assign(layers_.size(), Shape{});
            cache->outputs.assign(layers_.size(), Tensor{});
            cache->argmax.assign(layers_.size(), {});
        }
        Tensor x = input;
        std::size_t p = 0;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& l = layers_[i];
            const Shape in_shape = x.shape;
            if (l.kind == LayerKind::fully_connected && x.shape.size() != 2)
                x = Backend::reshape(std::move(x), {batch, x.size() / batch});
            Tensor y;
            std::vector<std::uint32_t> argmax;
            switch (l.kind) {
            case LayerKind::fully_connected:
                y = backend_.linear(x, Backend::value(params_[p].weight), Backend::value(params_[p].bias), l.activation_bits);
                ++p;
                break;
            case LayerKind::conv2d:
                y = backend_.conv(x, Backend::value(params_[p].weight), Backend::value(params_[p].bias), l, l.activation_bits);
                ++p;
                break;
            case LayerKind::relu: y = backend_.rebits(Backend::relu(x), l.activation_bits); break;
            case LayerKind::max_pool: y = backend_.rebits(Backend::max_pool(x, argmax), l.activation_bits); break;
            }
            if (cache) {
                cache->inputs[i] = std::move(x);
                cache->input_shapes[i] = in_shape;
                cache->outputs[i] = y;
                cache->argmax[i] = std::move(argmax);
            }
            x = std::move(y);
        }
        return x;
    }

    /// Parameter gradients aligned with params(), each at its layer's gradient bits.
    std::vector<LayerGrads> backward(const ForwardCache<Tensor>& cache, const Tensor& grad_logits) const {
        if (cache.owner != this || cache.outputs.size() != layers_.size() || cache.outputs.back().shape != grad_logits.shape)
            throw Error("backward: stale cache");
        std::vector<LayerGrads> grads(params_.size());
        const std::size_t first_param_layer = param_layers_.empty() ? layers_.size() : param_layers_.front();
        Tensor g = grad_logits;
        std::size_t p = params_.size();
        for (std::size_t idx = layers_.size(); idx-- > 0;) {
            if (idx < first_param_layer) break;
            const auto& l = layers_[idx];
            const bool need_input = idx > first_param_layer;
            switch (l.kind) {
            case LayerKind::fully_connected:
            case LayerKind::conv2d: {
                --p;
                const auto& w = Backend::value(params_[p].weight);
                auto r = l.kind == LayerKind::fully_connected
                             ? backend_.linear_backward(cache.inputs[idx], w, g, l.gradient_bits, need_input)
                             : backend_.conv_backward(cache.inputs[idx], w, g, l, l.gradient_bits, need_input);
                grads[p] = {std::move(r.weight), std::move(r.bias)};
                if (need_input) g = Backend::reshape(std::move(r.input), cache.input_shapes[idx]);
                break;
            }
            case LayerKind::relu: g = Backend::relu_backward(cache.outputs[idx], g); break;
            case LayerKind::max_pool: g = Backend::max_pool_backward(g, cache.argmax[idx], cache.inputs[idx].shape); break;
            }
        }
        return grads;
    }

private:
    std::vector<LayerSpec> layers_;
    Shape input_shape_;
    Backend backend_;
    std::vector<Shape> shapes_;
    std::vector<LayerParams> params_;
    std::vector<std::size_t> param_layers_;
};

// ---------------------------------------------------------------- classifier head

inline RealTensor one_hot(const std::vector<int>& labels, std::size_t classes) {
    RealTensor t({labels.size(), classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= classes)
            throw Error("label " + std::to_string(labels[n]) + " outside 0.." + std::to_string(classes - 1));
        t[n * classes + static_cast<std::size_t>(labels[n])] = 1.0;
    }
    return t;
}

struct SoftmaxResult {
    double loss = 0.0; // mean cross-entropy over the batch
    RealTensor probs;
};

/// Softmax (max-subtracted) and mean cross-entropy against one-hot targets.
inline SoftmaxResult softmax_xent_forward(const RealTensor& logits, const RealTensor& targets) {
    if (logits.shape.size() != 2 || logits.shape != targets.shape)
        throw Error("softmax: logits " + shape_str(logits.shape) + " and targets " + shape_str(targets.shape) + " disagree");
    const std::size_t batch = logits.shape[0], classes = logits.shape[1];
    SoftmaxResult r{0.0, RealTensor(logits.shape)};
    for (std::size_t n = 0; n < batch; ++n) {
        const double* s = logits.values.data() + n * classes;
        const double* t = targets.values.data() + n * classes;
        std::size_t ones = 0, hot = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (t[c] == 1.0) {
                ++ones;
                hot = c;
            } else if (t[c] != 0.0) {
                ones = 2;
            }
        }
        if (ones != 1) throw Error("non-one-hot target row " + std::to_string(n));
        const double mx = *std::max_element(s, s + classes);
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(s[c] - mx);
        double* y = r.probs.values.data() + n * classes;
        for (std::size_t c = 0; c < classes; ++c) y[c] = std::exp(s[c] - mx) / denom;
        r.loss -= (s[hot] - mx) - std::log(denom);
    }
    r.loss /= static_cast<double>(batch);
    return r;
}

inline SoftmaxResult softmax_xent_forward(const QTensor& logits, const RealTensor& targets) {
    return softmax_xent_forward(dequantize(logits), targets);
}

/// (y - t) / batch in real arithmetic.
inline RealTensor softmax_xent_grad(const RealTensor& probs, const RealTensor& targets) {
    if (probs.shape != targets.shape || probs.shape.size() != 2) throw Error("softmax backward: shape mismatch");
    const auto batch = static_cast<double>(probs.shape[0]);
    RealTensor g(probs.shape);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (probs[i] - targets[i]) / batch;
    return g;
}

/// dL/ds quantized with a per-tensor dynamic exponent; this is where small
/// non-target components can vanish.
inline QTensor softmax_xent_backward(const RealTensor& probs, const RealTensor& targets, int gradient_bits,
                                     int zero_exponent = kDefaultZeroExponent) {
    return qt_quantize(softmax_xent_grad(probs, targets), gradient_bits, zero_exponent);
}

/// Share of non-target components of a quantized dL/ds that are exactly zero.
inline double zeroed_fraction(const QTensor& grad, const RealTensor& targets) {
    std::size_t zeros = 0, total = 0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (targets[i] != 0.0) continue;
        ++total;
        if (grad.codes[i] == 0) ++zeros;
    }
    return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

/// Index of the largest logit per row; ties go to the lowest index.
inline std::vector<int> argmax_rows(const RealTensor& logits) {
    const std::size_t batch = logits.shape[0], classes = logits.shape[1];
    std::vector<int> out(batch);
    for (std::size_t n = 0; n < batch; ++n) {
        const double* s = logits.values.data() + n * classes;
        out[n] = static_cast<int>(std::max_element(s, s + classes) - s);
    }
    return out;
}

} // namespace lbt
