// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "itrain/rng.hpp"

namespace itrain {

enum class Activation { identity, tanh };

[[nodiscard]] std::string_view to_string(Activation activation) noexcept;
[[nodiscard]] std::optional<Activation> parse_activation(std::string_view name) noexcept;

/// Dense layer y = act(W x + b). `weight` is row-major, `outputs` x `inputs`.
/// `bias` is either empty or `outputs` long.
struct Layer {
    std::string name;
    std::size_t inputs = 0;
    std::size_t outputs = 0;
    std::vector<double> weight;
    std::vector<double> bias;
    Activation activation = Activation::identity;
    /// Inverted dropout on this layer's output during training; absent for
    /// layers that do not support dropout.
    std::optional<double> dropout_rate;

    friend bool operator==(const Layer&, const Layer&) = default;
};

struct ModelParams {
    std::vector<Layer> layers;

    [[nodiscard]] Layer* find(std::string_view name);
    [[nodiscard]] const Layer* find(std::string_view name) const;
    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] bool all_finite() const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Per-layer buffers shaped like a ModelParams (gradients, velocity).
struct LayerBuffers {
    std::vector<double> weight;
    std::vector<double> bias;

    friend bool operator==(const LayerBuffers&, const LayerBuffers&) = default;
};

using ParamBuffers = std::vector<LayerBuffers>;

[[nodiscard]] ParamBuffers zeros_like(const ModelParams& model);
[[nodiscard]] bool same_shape(const ModelParams& model, const ParamBuffers& buffers);
[[nodiscard]] double global_norm(const ParamBuffers& buffers);
[[nodiscard]] bool all_finite(const ParamBuffers& buffers);

struct Sample {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Sample&, const Sample&) = default;
};

/// Quadratic bowl f(w) = lambda/2 * sum(w^2) over the single layer "w".
[[nodiscard]] ModelParams make_quadratic_model(double w0);

/// 1 -> hidden (tanh, layer "h1") -> 1 (identity, layer "out"), initialised
/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights first, then bias, layer by layer.
[[nodiscard]] ModelParams make_mlp_model(std::size_t hidden_width, Rng& rng);

/// Redraws the layer's weights and bias from its initializer.
void reinitialize_layer(Layer& layer, Rng& rng);

struct LossAndGrads {
    double loss = 0.0;
    ParamBuffers grads;
};

[[nodiscard]] LossAndGrads quadratic_loss_and_grad(const ModelParams& model, double lambda);

/// Mean squared error over the batch with exact backprop. A non-null `dropout_rng`
/// enables dropout on layers with a positive rate.
[[nodiscard]] LossAndGrads mlp_loss_and_grad(const ModelParams& model, std::span<const Sample> batch,
                                             Rng* dropout_rng = nullptr);

/// Forward pass without dropout.
[[nodiscard]] double mlp_predict(const ModelParams& model, double x);

/// Mean squared error over `samples`, dropout disabled.
[[nodiscard]] double mlp_mean_loss(const ModelParams& model, std::span<const Sample> samples);

struct ClipResult {
    ParamBuffers grads;
    double pre_norm = 0.0;
};

/// Scales grads by threshold/pre_norm when pre_norm exceeds threshold.
/// Throws Error(non_finite) for non-finite gradients.
[[nodiscard]] ClipResult clip_gradients(ParamBuffers grads, double threshold);

struct OptimizerState {
    double lr = 1e-3;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::optional<double> grad_clip;
    ParamBuffers velocity;

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct StepResult {
    ModelParams model;
    OptimizerState optimizer;
};

/// v' = momentum*v + g + weight_decay*p ; p' = p - lr*v'.
/// Throws Error(shape_mismatch) or Error(non_finite).
[[nodiscard]] StepResult sgd_momentum_step(ModelParams model, const ParamBuffers& grads, OptimizerState optimizer);

}  // namespace itrain
