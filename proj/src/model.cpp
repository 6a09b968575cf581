// SPDX-License-Identifier: Apache-2.0
#include "itrain/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "itrain/error.hpp"

namespace itrain {

namespace {

bool finite_all(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void check_chain(const ModelParams& model) {
    if (model.layers.empty()) {
        throw Error(ErrorCode::shape_mismatch, "model has no layers");
    }
    if (model.layers.front().inputs != 1 || model.layers.back().outputs != 1) {
        throw Error(ErrorCode::shape_mismatch, "model must map 1 input to 1 output");
    }
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Layer& layer = model.layers[l];
        if (layer.weight.size() != layer.inputs * layer.outputs ||
            (!layer.bias.empty() && layer.bias.size() != layer.outputs)) {
            throw Error(ErrorCode::shape_mismatch, "layer " + layer.name + " has inconsistent buffers", layer.name);
        }
        if (l > 0 && model.layers[l - 1].outputs != layer.inputs) {
            throw Error(ErrorCode::shape_mismatch, "layer " + layer.name + " input width mismatch", layer.name);
        }
    }
}

double activate(Activation activation, double z) {
    return activation == Activation::tanh ? std::tanh(z) : z;
}

struct LayerTrace {
    std::vector<double> activated;  // act(z) before dropout
    std::vector<double> mask;       // empty when dropout inactive
    std::vector<double> output;     // after dropout
};

// Forward through every layer, keeping what backprop needs.
std::vector<LayerTrace> forward(const ModelParams& model, double x, Rng* dropout_rng) {
    std::vector<LayerTrace> trace(model.layers.size());
    std::vector<double> input{x};
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Layer& layer = model.layers[l];
        LayerTrace& t = trace[l];
        t.activated.resize(layer.outputs);
        for (std::size_t o = 0; o < layer.outputs; ++o) {
            double z = layer.bias.empty() ? 0.0 : layer.bias[o];
            for (std::size_t i = 0; i < layer.inputs; ++i) {
                z += layer.weight[o * layer.inputs + i] * input[i];
            }
            t.activated[o] = activate(layer.activation, z);
        }
        t.output = t.activated;
        const double rate = layer.dropout_rate.value_or(0.0);
        if (dropout_rng != nullptr && rate > 0.0) {
            t.mask.resize(layer.outputs);
            const double scale = 1.0 / (1.0 - rate);
            for (std::size_t o = 0; o < layer.outputs; ++o) {
                t.mask[o] = dropout_rng->uniform() >= rate ? scale : 0.0;
                t.output[o] *= t.mask[o];
            }
        }
        input = t.output;
    }
    return trace;
}

}  // namespace

std::string_view to_string(Activation activation) noexcept {
    return activation == Activation::tanh ? "tanh" : "identity";
}

std::optional<Activation> parse_activation(std::string_view name) noexcept {
    if (name == "tanh") {
        return Activation::tanh;
    }
    if (name == "identity") {
        return Activation::identity;
    }
    return std::nullopt;
}

Layer* ModelParams::find(std::string_view name) {
    auto it = std::find_if(layers.begin(), layers.end(), [&](const Layer& l) { return l.name == name; });
    return it == layers.end() ? nullptr : &*it;
}

const Layer* ModelParams::find(std::string_view name) const {
    return const_cast<ModelParams*>(this)->find(name);
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers) {
        n += layer.weight.size() + layer.bias.size();
    }
    return n;
}

bool ModelParams::all_finite() const {
    return std::all_of(layers.begin(), layers.end(),
                       [](const Layer& l) { return finite_all(l.weight) && finite_all(l.bias); });
}

ParamBuffers zeros_like(const ModelParams& model) {
    ParamBuffers buffers;
    buffers.reserve(model.layers.size());
    for (const auto& layer : model.layers) {
        buffers.push_back({std::vector<double>(layer.weight.size(), 0.0), std::vector<double>(layer.bias.size(), 0.0)});
    }
    return buffers;
}

bool same_shape(const ModelParams& model, const ParamBuffers& buffers) {
    if (model.layers.size() != buffers.size()) {
        return false;
    }
    for (std::size_t l = 0; l < buffers.size(); ++l) {
        if (model.layers[l].weight.size() != buffers[l].weight.size() ||
            model.layers[l].bias.size() != buffers[l].bias.size()) {
            return false;
        }
    }
    return true;
}

double global_norm(const ParamBuffers& buffers) {
    double sum = 0.0;
    for (const auto& b : buffers) {
        for (double g : b.weight) {
            sum += g * g;
        }
        for (double g : b.bias) {
            sum += g * g;
        }
    }
    return std::sqrt(sum);
}

bool all_finite(const ParamBuffers& buffers) {
    return std::all_of(buffers.begin(), buffers.end(),
                       [](const LayerBuffers& b) { return finite_all(b.weight) && finite_all(b.bias); });
}

ModelParams make_quadratic_model(double w0) {
    ModelParams model;
    model.layers.push_back(Layer{"w", 1, 1, {w0}, {}, Activation::identity, std::nullopt});
    return model;
}

void reinitialize_layer(Layer& layer, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.inputs));
    for (double& w : layer.weight) {
        w = rng.uniform(-bound, bound);
    }
    for (double& b : layer.bias) {
        b = rng.uniform(-bound, bound);
    }
}

ModelParams make_mlp_model(std::size_t hidden_width, Rng& rng) {
    if (hidden_width == 0) {
        throw Error(ErrorCode::invalid_value, "hidden_width must be positive", "hidden_width");
    }
    ModelParams model;
    Layer hidden{"h1", 1, hidden_width, std::vector<double>(hidden_width), std::vector<double>(hidden_width),
                 Activation::tanh, 0.0};
    Layer out{"out", hidden_width, 1, std::vector<double>(hidden_width), std::vector<double>(1),
              Activation::identity, std::nullopt};
    reinitialize_layer(hidden, rng);
    reinitialize_layer(out, rng);
    model.layers.push_back(std::move(hidden));
    model.layers.push_back(std::move(out));
    return model;
}

LossAndGrads quadratic_loss_and_grad(const ModelParams& model, double lambda) {
    if (model.layers.size() != 1) {
        throw Error(ErrorCode::shape_mismatch, "quadratic task expects a single layer");
    }
    LossAndGrads out;
    out.grads = zeros_like(model);
    double sum = 0.0;
    const auto& w = model.layers[0].weight;
    for (std::size_t i = 0; i < w.size(); ++i) {
        sum += w[i] * w[i];
        out.grads[0].weight[i] = lambda * w[i];
    }
    out.loss = 0.5 * lambda * sum;
    return out;
}

LossAndGrads mlp_loss_and_grad(const ModelParams& model, std::span<const Sample> batch, Rng* dropout_rng) {
    if (batch.empty()) {
        throw Error(ErrorCode::shape_mismatch, "batch is empty");
    }
    check_chain(model);
    for (const Sample& s : batch) {
        if (!std::isfinite(s.x) || !std::isfinite(s.y)) {
            throw Error(ErrorCode::non_finite, "batch contains a non-finite value");
        }
    }

    LossAndGrads out;
    out.grads = zeros_like(model);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    double sum = 0.0;

    for (const Sample& s : batch) {
        const auto trace = forward(model, s.x, dropout_rng);
        const double error = trace.back().output[0] - s.y;
        sum += error * error;

        std::vector<double> delta{2.0 * error * inv_batch};
        for (std::size_t l = model.layers.size(); l-- > 0;) {
            const Layer& layer = model.layers[l];
            const LayerTrace& t = trace[l];
            for (std::size_t o = 0; o < layer.outputs; ++o) {
                if (!t.mask.empty()) {
                    delta[o] *= t.mask[o];
                }
                if (layer.activation == Activation::tanh) {
                    delta[o] *= 1.0 - t.activated[o] * t.activated[o];
                }
            }
            const double* input = l == 0 ? &s.x : trace[l - 1].output.data();
            LayerBuffers& g = out.grads[l];
            std::vector<double> previous(layer.inputs, 0.0);
            for (std::size_t o = 0; o < layer.outputs; ++o) {
                for (std::size_t i = 0; i < layer.inputs; ++i) {
                    g.weight[o * layer.inputs + i] += delta[o] * input[i];
                    previous[i] += layer.weight[o * layer.inputs + i] * delta[o];
                }
                if (!g.bias.empty()) {
                    g.bias[o] += delta[o];
                }
            }
            delta = std::move(previous);
        }
    }
    out.loss = sum * inv_batch;
    return out;
}

double mlp_predict(const ModelParams& model, double x) {
    check_chain(model);
    return forward(model, x, nullptr).back().output[0];
}

double mlp_mean_loss(const ModelParams& model, std::span<const Sample> samples) {
    if (samples.empty()) {
        throw Error(ErrorCode::shape_mismatch, "evaluation set is empty");
    }
    double sum = 0.0;
    for (const Sample& s : samples) {
        const double error = mlp_predict(model, s.x) - s.y;
        sum += error * error;
    }
    return sum / static_cast<double>(samples.size());
}

ClipResult clip_gradients(ParamBuffers grads, double threshold) {
    if (!(threshold > 0.0)) {
        throw Error(ErrorCode::invalid_value, "clip threshold must be positive", "grad_clip");
    }
    if (!all_finite(grads)) {
        throw Error(ErrorCode::non_finite, "non-finite gradient");
    }
    const double pre_norm = global_norm(grads);
    auto scale_all = [&](double scale) {
        for (auto& b : grads) {
            for (double& g : b.weight) {
                g *= scale;
            }
            for (double& g : b.bias) {
                g *= scale;
            }
        }
    };
    if (pre_norm > threshold) {
        scale_all(threshold / pre_norm);
        // Rounding can leave the norm a few ulps above the threshold; shave it off.
        while (global_norm(grads) > threshold) {
            scale_all(1.0 - 4.0 * std::numeric_limits<double>::epsilon());
        }
    }
    return {std::move(grads), pre_norm};
}

StepResult sgd_momentum_step(ModelParams model, const ParamBuffers& grads, OptimizerState optimizer) {
    if (!same_shape(model, grads)) {
        throw Error(ErrorCode::shape_mismatch, "gradient shape does not match model");
    }
    if (!same_shape(model, optimizer.velocity)) {
        throw Error(ErrorCode::shape_mismatch, "velocity shape does not match model");
    }
    auto update = [&](std::vector<double>& params, std::vector<double>& velocity, const std::vector<double>& g) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            velocity[i] = optimizer.momentum * velocity[i] + g[i] + optimizer.weight_decay * params[i];
            params[i] -= optimizer.lr * velocity[i];
        }
    };
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        update(model.layers[l].weight, optimizer.velocity[l].weight, grads[l].weight);
        update(model.layers[l].bias, optimizer.velocity[l].bias, grads[l].bias);
    }
    if (!model.all_finite() || !all_finite(optimizer.velocity)) {
        throw Error(ErrorCode::non_finite, "non-finite parameter update");
    }
    return {std::move(model), std::move(optimizer)};
}

}  // namespace itrain
