// SPDX-License-Identifier: Apache-2.0
#include "itrain/dataset.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "itrain/error.hpp"

namespace itrain {

void InteractiveDataset::update_data(const std::string& source, const std::vector<Sample>& samples) {
    if (source.empty()) {
        throw Error(ErrorCode::invalid_value, "source name must not be empty", "source");
    }
    if (samples.empty()) {
        throw Error(ErrorCode::invalid_value, "example list is empty", "examples");
    }
    for (const Sample& s : samples) {
        if (!std::isfinite(s.x) || !std::isfinite(s.y)) {
            throw Error(ErrorCode::invalid_value, "examples must be finite {x, y} pairs", "examples");
        }
    }
    const std::uint64_t generation = generation_ + 1;
    std::vector<Example> examples;
    examples.reserve(samples.size());
    for (const Sample& s : samples) {
        examples.push_back({s, source, generation});
    }
    generation_ = generation;
    sources_.insert_or_assign(source, std::move(examples));
    weights_.try_emplace(source, 1.0);
}

void InteractiveDataset::set_mixture_weights(const Weights& weights) {
    Weights next = weights_;
    for (const auto& [name, w] : weights) {
        if (!sources_.contains(name)) {
            throw Error(ErrorCode::unknown_source, "unknown data source \"" + name + "\"", name);
        }
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw Error(ErrorCode::invalid_value, "weight for \"" + name + "\" must be finite and >= 0", name);
        }
        next[name] = w;
    }
    double total = 0.0;
    for (const auto& [_, w] : next) {
        total += w;
    }
    if (!(total > 0.0)) {
        throw Error(ErrorCode::invalid_value, "at least one source weight must be positive", "weights");
    }
    weights_ = std::move(next);
}

std::vector<Example> InteractiveDataset::next_batch(std::size_t batch_size, Rng& rng) const {
    double total = 0.0;
    for (const auto& [name, w] : weights_) {
        if (w > 0.0) {
            total += w;
        }
    }
    if (!(total > 0.0)) {
        throw Error(ErrorCode::invalid_value, "no data source has positive weight", "weights");
    }
    std::vector<Example> batch;
    batch.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
        const double target = rng.uniform() * total;
        const std::vector<Example>* chosen = nullptr;
        double cumulative = 0.0;
        for (const auto& [name, w] : weights_) {
            if (!(w > 0.0)) {
                continue;
            }
            chosen = &sources_.at(name);
            cumulative += w;
            if (target < cumulative) {
                break;
            }
        }
        batch.push_back((*chosen)[rng.index(chosen->size())]);
    }
    return batch;
}

InteractiveDataset InteractiveDataset::restore(std::map<std::string, std::vector<Example>, std::less<>> sources,
                                               Weights weights, std::uint64_t generation) {
    InteractiveDataset ds;
    ds.sources_ = std::move(sources);
    ds.weights_ = std::move(weights);
    ds.generation_ = generation;
    return ds;
}

std::vector<Sample> load_samples(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io_error, "cannot read data file " + path.string(), "data_path");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::parse_error, "data file is not valid JSON: " + std::string(e.what()), "data_path");
    }
    if (!j.is_array()) {
        throw Error(ErrorCode::invalid_value, "data file must hold a JSON array", "data_path");
    }
    std::vector<Sample> samples;
    samples.reserve(j.size());
    for (const auto& item : j) {
        if (!item.is_object() || !item.contains("x") || !item.contains("y") || !item["x"].is_number() ||
            !item["y"].is_number()) {
            throw Error(ErrorCode::invalid_value, "each example must be {\"x\": number, \"y\": number}", "data_path");
        }
        samples.push_back({item["x"].get<double>(), item["y"].get<double>()});
    }
    return samples;
}

}  // namespace itrain
