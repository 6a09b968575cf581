// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

namespace itrain {

enum class TaskKind { quadratic, mlp_sin };
enum class LrSchedule { none, linear };

/// Run configuration, read from a JSON file.
struct RunConfig {
    TaskKind task = TaskKind::mlp_sin;
    double lambda = 500.0;  // quadratic curvature
    double w0 = 1.0;        // quadratic starting point
    std::uint64_t total_steps = 100;
    std::uint64_t seed = 0;
    double lr0 = 1e-3;
    double momentum = 0.0;
    double weight_decay = 0.0;
    std::optional<double> grad_clip;
    LrSchedule schedule = LrSchedule::none;
    std::uint64_t eval_cadence = 0;
    std::size_t hidden_width = 32;
    std::size_t batch_size = 32;
    std::size_t train_size = 256;
    std::size_t val_size = 128;
    double noise_std = 0.1;
    /// Wall-clock pause after each step; does not affect results.
    double step_delay_ms = 0.0;

    [[nodiscard]] static RunConfig from_json(const nlohmann::json& j);
    [[nodiscard]] static RunConfig load(const std::filesystem::path& path);
    [[nodiscard]] nlohmann::json to_json() const;

    /// Hash of every field that influences the trajectory.
    [[nodiscard]] std::string identity_hash() const;
};

}  // namespace itrain
