// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "itrain/config.hpp"
#include "itrain/state.hpp"
#include "itrain/trainer.hpp"

namespace itrain {

/// Feeds a recorded intervention log back to a trainer: each entry is handed
/// out at the boundary (step, branch) where it was originally applied.
class ReplaySource final : public CommandSource {
public:
    explicit ReplaySource(std::vector<InterventionEntry> entries);

    std::vector<CommandEnvelope> poll(const TrainerState& state) override;
    bool wait_for_commands(std::chrono::milliseconds timeout) override;
    void resolve(const std::string& uuid, CommandStatus status, const std::string& detail) override;

    [[nodiscard]] bool exhausted() const noexcept { return cursor_ == entries_.size(); }
    [[nodiscard]] const std::map<std::string, CommandStatus>& outcomes() const noexcept { return outcomes_; }

private:
    std::vector<InterventionEntry> entries_;
    std::size_t cursor_ = 0;
    std::uint64_t step_ = 0;
    std::string branch_;
    std::map<std::string, CommandStatus> outcomes_;
};

/// Keeps every published event in memory.
class MemorySink final : public EventSink {
public:
    void publish(const TrainingEvent& event) override { events_.push_back(event); }
    [[nodiscard]] const std::vector<TrainingEvent>& events() const noexcept { return events_; }

private:
    std::vector<TrainingEvent> events_;
};

/// Metric and evaluation lines per branch, in emission order.
struct Trajectory {
    std::map<std::string, std::vector<std::string>> metrics;
    std::map<std::string, std::vector<std::string>> evaluations;
    std::string reason;

    [[nodiscard]] static Trajectory from_events(const std::vector<TrainingEvent>& events);
    /// Reads metrics/<branch>.jsonl and metrics/<branch>.eval.jsonl under a run directory.
    [[nodiscard]] static Trajectory from_run_dir(const std::filesystem::path& run_dir);
};

/// Re-executes a run from its config and intervention log. Checkpoints are
/// written under `workdir`. Throws Error(config_mismatch) when the log was
/// recorded under a different configuration.
[[nodiscard]] Trajectory replay(const RunConfig& config, const InterventionLog& log,
                                const std::filesystem::path& workdir);

struct ReplayReport {
    bool identical = false;
    std::size_t branches = 0;
    std::size_t lines = 0;
    std::vector<std::string> mismatches;
};

/// Replays `<run_dir>` (config.json + interventions.jsonl) in a scratch
/// directory and compares against its recorded metric logs byte for byte.
[[nodiscard]] ReplayReport verify_run(const std::filesystem::path& run_dir);

[[nodiscard]] ReplayReport compare_trajectories(const Trajectory& recorded, const Trajectory& replayed);

}  // namespace itrain
