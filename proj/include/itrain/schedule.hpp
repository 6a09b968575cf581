// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "itrain/protocol.hpp"
#include "itrain/server.hpp"

namespace itrain {

/// One scripted intervention: submit `command` with `args` once the run
/// reaches `at_step`.
struct ScheduleEntry {
    std::uint64_t at_step = 0;
    std::string command;
    Json args = Json::object();
};

/// JSON lines of {"at_step", "command", "args"}; blank lines and lines
/// starting with '#' are skipped. Entries are validated against the registry
/// and returned sorted by step (stable).
[[nodiscard]] std::vector<ScheduleEntry> load_schedule(const std::filesystem::path& path,
                                                       const CommandRegistry& registry = default_registry());
[[nodiscard]] std::vector<ScheduleEntry> parse_schedule(std::string_view text,
                                                        const CommandRegistry& registry = default_registry());

/// Submits schedule entries to an in-process server from the trainer's
/// boundary hook, so each lands exactly at its step.
class ScheduleDriver {
public:
    ScheduleDriver(ControlServer& server, std::vector<ScheduleEntry> entries);

    void on_boundary(const TrainerState& state);

    [[nodiscard]] const std::vector<std::string>& submitted() const noexcept { return submitted_; }
    [[nodiscard]] bool done() const noexcept { return next_ == entries_.size(); }

private:
    ControlServer& server_;
    std::vector<ScheduleEntry> entries_;
    std::size_t next_ = 0;
    std::vector<std::string> submitted_;
};

}  // namespace itrain
