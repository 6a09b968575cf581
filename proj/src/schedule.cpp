// SPDX-License-Identifier: Apache-2.0
#include "itrain/schedule.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace itrain {

std::vector<ScheduleEntry> parse_schedule(std::string_view text, const CommandRegistry& registry) {
    std::vector<ScheduleEntry> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') {
            continue;
        }
        const std::string where = "schedule line " + std::to_string(number);
        const Json j = Json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw Error(ErrorCode::parse_error, where + ": not a JSON object");
        }
        for (const auto& [key, _] : j.items()) {
            if (key != "at_step" && key != "command" && key != "args") {
                throw Error(ErrorCode::invalid_field, where + ": unknown key \"" + key + "\"", key);
            }
        }
        if (!j.contains("at_step") || !j["at_step"].is_number_unsigned()) {
            throw Error(ErrorCode::invalid_field, where + ": at_step must be a non-negative integer", "at_step");
        }
        if (!j.contains("command") || !j["command"].is_string()) {
            throw Error(ErrorCode::missing_field, where + ": command must be a string", "command");
        }
        ScheduleEntry entry;
        entry.at_step = j["at_step"].get<std::uint64_t>();
        entry.command = j["command"].get<std::string>();
        entry.args = j.value("args", Json::object());
        CommandEnvelope probe;
        probe.command = entry.command;
        probe.args = entry.args.dump();
        probe.uuid = "schedule-probe";
        try {
            validate_envelope(probe, registry);
        } catch (const Error& e) {
            throw Error(e.code(), where + ": " + e.what(), e.field());
        }
        out.push_back(std::move(entry));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const ScheduleEntry& a, const ScheduleEntry& b) { return a.at_step < b.at_step; });
    return out;
}

std::vector<ScheduleEntry> load_schedule(const std::filesystem::path& path, const CommandRegistry& registry) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io_error, "cannot read schedule " + path.string());
    }
    std::ostringstream text;
    text << in.rdbuf();
    return parse_schedule(text.str(), registry);
}

ScheduleDriver::ScheduleDriver(ControlServer& server, std::vector<ScheduleEntry> entries)
    : server_(server), entries_(std::move(entries)) {}

void ScheduleDriver::on_boundary(const TrainerState& state) {
    while (next_ < entries_.size() && entries_[next_].at_step <= state.step) {
        const ScheduleEntry& entry = entries_[next_++];
        const SubmitResult result = server_.submit(make_envelope(entry.command, entry.args));
        if (result.accepted) {
            submitted_.push_back(result.uuid);
        }
    }
}

}  // namespace itrain
