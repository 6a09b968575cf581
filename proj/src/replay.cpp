// SPDX-License-Identifier: Apache-2.0
#include "itrain/replay.hpp"

#include <fstream>

#include "itrain/codec.hpp"

namespace itrain {

ReplaySource::ReplaySource(std::vector<InterventionEntry> entries) : entries_(std::move(entries)) {}

std::vector<CommandEnvelope> ReplaySource::poll(const TrainerState& state) {
    step_ = state.step;
    branch_ = state.branch_id;
    std::vector<CommandEnvelope> out;
    while (cursor_ < entries_.size() && entries_[cursor_].applied_at_step == step_ &&
           entries_[cursor_].branch_id == branch_) {
        CommandEnvelope envelope = entries_[cursor_].envelope;
        envelope.status = CommandStatus::running;
        out.push_back(std::move(envelope));
        ++cursor_;
    }
    return out;
}

bool ReplaySource::wait_for_commands(std::chrono::milliseconds) {
    return cursor_ < entries_.size() && entries_[cursor_].applied_at_step == step_ &&
           entries_[cursor_].branch_id == branch_;
}

void ReplaySource::resolve(const std::string& uuid, CommandStatus status, const std::string&) {
    outcomes_[uuid] = status;
}

Trajectory Trajectory::from_events(const std::vector<TrainingEvent>& events) {
    Trajectory t;
    for (const auto& event : events) {
        if (event.type == EventType::metric) {
            t.metrics[event.branch_id].push_back(metric_line(event));
        } else if (event.type == EventType::evaluation_result) {
            t.evaluations[event.branch_id].push_back(metric_line(event));
        } else if (event.type == EventType::training_ended) {
            t.reason = event.payload.at("reason").get<std::string>();
        }
    }
    return t;
}

Trajectory Trajectory::from_run_dir(const std::filesystem::path& run_dir) {
    Trajectory t;
    const auto dir = run_dir / "metrics";
    if (!std::filesystem::is_directory(dir)) {
        return t;
    }
    constexpr std::string_view kEval = ".eval.jsonl";
    constexpr std::string_view kMetric = ".jsonl";
    for (const auto& file : std::filesystem::directory_iterator(dir)) {
        const std::string name = file.path().filename().string();
        std::vector<std::string>* target = nullptr;
        if (name.ends_with(kEval)) {
            target = &t.evaluations[name.substr(0, name.size() - kEval.size())];
        } else if (name.ends_with(kMetric)) {
            target = &t.metrics[name.substr(0, name.size() - kMetric.size())];
        } else {
            continue;
        }
        std::ifstream in(file.path());
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) {
                target->push_back(line);
            }
        }
    }
    return t;
}

Trajectory replay(const RunConfig& config, const InterventionLog& log, const std::filesystem::path& workdir) {
    const std::string hash = config.identity_hash();
    if (log.config_hash() != hash) {
        throw Error(ErrorCode::config_mismatch,
                    "intervention log was recorded with config " + log.config_hash() + ", not " + hash, "config_hash");
    }
    RunConfig quiet = config;
    quiet.step_delay_ms = 0.0;
    ReplaySource source(log.entries());
    MemorySink sink;
    TrainerOptions options;
    options.run_dir = workdir;
    options.record_interventions = false;
    options.pause_poll = std::chrono::milliseconds(0);
    Trainer trainer(quiet, source, sink, options);
    (void)trainer.run();
    return Trajectory::from_events(sink.events());
}

namespace {

void compare_group(const std::string& kind, const std::map<std::string, std::vector<std::string>>& recorded,
                   const std::map<std::string, std::vector<std::string>>& replayed, ReplayReport& report) {
    std::map<std::string, int> branches;
    for (const auto& [b, _] : recorded) branches[b] |= 1;
    for (const auto& [b, _] : replayed) branches[b] |= 2;
    for (const auto& [branch, where] : branches) {
        if (where != 3) {
            report.mismatches.push_back(kind + " " + branch + ": present only in the " +
                                        (where == 1 ? "recorded" : "replayed") + " run");
            continue;
        }
        const auto& a = recorded.at(branch);
        const auto& b = replayed.at(branch);
        ++report.branches;
        report.lines += a.size();
        const std::size_t common = std::min(a.size(), b.size());
        for (std::size_t i = 0; i < common; ++i) {
            if (a[i] != b[i]) {
                report.mismatches.push_back(kind + " " + branch + " line " + std::to_string(i + 1) +
                                            ": recorded " + a[i] + " replayed " + b[i]);
                break;
            }
        }
        if (a.size() != b.size()) {
            report.mismatches.push_back(kind + " " + branch + ": recorded " + std::to_string(a.size()) +
                                        " lines, replayed " + std::to_string(b.size()));
        }
    }
}

}  // namespace

ReplayReport compare_trajectories(const Trajectory& recorded, const Trajectory& replayed) {
    ReplayReport report;
    compare_group("metrics", recorded.metrics, replayed.metrics, report);
    compare_group("evaluations", recorded.evaluations, replayed.evaluations, report);
    report.identical = report.mismatches.empty();
    return report;
}

ReplayReport verify_run(const std::filesystem::path& run_dir) {
    const RunConfig config = RunConfig::load(run_dir / "config.json");
    const InterventionLog log = InterventionLog::read(run_dir / "interventions.jsonl");
    const auto scratch = std::filesystem::temp_directory_path() / ("itrain-replay-" + random_uuid());
    std::filesystem::create_directories(scratch);
    struct Cleanup {
        std::filesystem::path path;
        ~Cleanup() {
            std::error_code ec;
            std::filesystem::remove_all(path, ec);
        }
    } cleanup{scratch};
    const Trajectory replayed = replay(config, log, scratch);
    return compare_trajectories(Trajectory::from_run_dir(run_dir), replayed);
}

}  // namespace itrain
