// SPDX-License-Identifier: Apache-2.0
// Property checks shared by the unit tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "itrain/dataset.hpp"
#include "itrain/model.hpp"

namespace itrain::support {

inline std::vector<double*> parameter_slots(ModelParams& model) {
    std::vector<double*> out;
    for (auto& layer : model.layers) {
        for (double& w : layer.weight) out.push_back(&w);
        for (double& b : layer.bias) out.push_back(&b);
    }
    return out;
}

inline std::vector<double> flatten(const ParamBuffers& buffers) {
    std::vector<double> out;
    for (const auto& b : buffers) {
        out.insert(out.end(), b.weight.begin(), b.weight.end());
        out.insert(out.end(), b.bias.begin(), b.bias.end());
    }
    return out;
}

// Worst relative error between analytic and central-difference gradients over
// `configs` random networks, measured per configuration as ||a - f|| / ||a + f||.
inline double finite_difference_worst(int configs, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<std::size_t> width(1, 16);
    std::uniform_int_distribution<std::size_t> batch(1, 12);
    std::uniform_real_distribution<double> coord(-2.0, 2.0);
    double worst = 0.0;
    for (int c = 0; c < configs; ++c) {
        Rng rng(gen());
        ModelParams model = make_mlp_model(width(gen), rng);
        for (double* p : parameter_slots(model)) {
            *p += 0.3 * coord(gen);
        }
        std::vector<Sample> samples(batch(gen));
        for (auto& s : samples) {
            s = {coord(gen), coord(gen)};
        }
        const auto analytic = flatten(mlp_loss_and_grad(model, samples).grads);
        auto slots = parameter_slots(model);
        double diff2 = 0.0;
        double sum2 = 0.0;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            const double saved = *slots[i];
            const double h = 1e-5 * std::max(1.0, std::abs(saved));
            *slots[i] = saved + h;
            const double up = mlp_mean_loss(model, samples);
            *slots[i] = saved - h;
            const double down = mlp_mean_loss(model, samples);
            *slots[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            sum2 += (analytic[i] + numeric) * (analytic[i] + numeric);
        }
        const double rel = sum2 > 0.0 ? std::sqrt(diff2 / sum2) : std::sqrt(diff2);
        worst = std::max(worst, rel);
    }
    return worst;
}

// Worst relative deviation of the post-clip norm from min(pre_norm, threshold).
inline double clip_property_worst(int trials, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<std::size_t> layers(1, 4);
    std::uniform_int_distribution<std::size_t> size(1, 40);
    std::uniform_real_distribution<double> exponent(-6.0, 6.0);
    std::normal_distribution<double> normal;
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const double scale = std::pow(10.0, exponent(gen));
        ParamBuffers grads(layers(gen));
        for (auto& b : grads) {
            b.weight.resize(size(gen));
            b.bias.resize(size(gen) % 3);
            for (double& g : b.weight) g = scale * normal(gen);
            for (double& g : b.bias) g = scale * normal(gen);
        }
        const double threshold = std::pow(10.0, exponent(gen));
        const double expected_pre = global_norm(grads);
        const ClipResult clipped = clip_gradients(grads, threshold);
        const double post = global_norm(clipped.grads);
        const double target = std::min(expected_pre, threshold);
        worst = std::max(worst, std::abs(post - target) / target);
        worst = std::max(worst, std::abs(clipped.pre_norm - expected_pre) / expected_pre);
    }
    return worst;
}

// Fraction of draws taken from `source` under the dataset's current weights.
inline double mixture_fraction(const InteractiveDataset& dataset, const std::string& source, std::size_t draws,
                               std::uint64_t seed) {
    Rng rng(seed);
    std::size_t hits = 0;
    std::size_t seen = 0;
    while (seen < draws) {
        const auto batch = dataset.next_batch(std::min<std::size_t>(1000, draws - seen), rng);
        for (const auto& e : batch) {
            hits += e.source == source ? 1 : 0;
        }
        seen += batch.size();
    }
    return static_cast<double>(hits) / static_cast<double>(draws);
}

}  // namespace itrain::support
