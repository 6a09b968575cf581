// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "itrain/config.hpp"
#include "itrain/dataset.hpp"
#include "itrain/model.hpp"
#include "itrain/rng.hpp"

namespace itrain {

/// Everything the training loop owns. Checkpoints store all of it except the
/// run-control flags (paused, stopping).
struct TrainerState {
    std::uint64_t step = 0;
    ModelParams model;
    OptimizerState optimizer;
    bool paused = false;
    bool stopping = false;
    std::string branch_id = "b0";
    Rng rng;
    InteractiveDataset dataset;
    std::uint64_t eval_cadence = 0;
    /// Linear anneal still in control of lr; cleared by any lr intervention.
    bool schedule_active = false;

    friend bool operator==(const TrainerState&, const TrainerState&) = default;
};

/// Fresh state for a config: data and validation set come from a stream seeded
/// by `seed`, parameter init and batches from a second stream.
[[nodiscard]] TrainerState initial_state(const RunConfig& config);

/// Deterministic held-out set for the mlp_sin task (empty for quadratic).
[[nodiscard]] std::vector<Sample> validation_set(const RunConfig& config);

/// Name of the source holding the generated training data.
inline constexpr const char* kDefaultSource = "train";

}  // namespace itrain
