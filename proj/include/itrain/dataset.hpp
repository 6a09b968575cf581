// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "itrain/model.hpp"
#include "itrain/rng.hpp"

namespace itrain {

/// A training example and where it came from.
struct Example {
    Sample sample;
    std::string source;
    std::uint64_t generation = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

/// Named in-memory data sources mixed by runtime-adjustable, unnormalized weights.
class InteractiveDataset {
public:
    using Weights = std::map<std::string, double, std::less<>>;

    InteractiveDataset() = default;

    /// Replaces (or creates) a source. New examples carry the next generation;
    /// new sources start with weight 1.0, existing ones keep their weight.
    void update_data(const std::string& source, const std::vector<Sample>& samples);

    /// Sets weights for the named sources; unnamed sources keep theirs.
    void set_mixture_weights(const Weights& weights);

    /// Source drawn with probability weight / sum(weights), then an example
    /// uniformly within it. Always consumes two uniforms per example.
    [[nodiscard]] std::vector<Example> next_batch(std::size_t batch_size, Rng& rng) const;

    [[nodiscard]] const std::map<std::string, std::vector<Example>, std::less<>>& sources() const noexcept {
        return sources_;
    }
    [[nodiscard]] const Weights& weights() const noexcept { return weights_; }
    [[nodiscard]] std::uint64_t generation() const noexcept { return generation_; }

    /// Used when restoring from a checkpoint.
    static InteractiveDataset restore(std::map<std::string, std::vector<Example>, std::less<>> sources,
                                      Weights weights, std::uint64_t generation);

    friend bool operator==(const InteractiveDataset&, const InteractiveDataset&) = default;

private:
    std::map<std::string, std::vector<Example>, std::less<>> sources_;
    Weights weights_;
    std::uint64_t generation_ = 0;
};

/// Reads a JSON array of {"x": number, "y": number}.
[[nodiscard]] std::vector<Sample> load_samples(const std::filesystem::path& path);

}  // namespace itrain
