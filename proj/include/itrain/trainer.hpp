// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "itrain/config.hpp"
#include "itrain/protocol.hpp"
#include "itrain/state.hpp"
#include "itrain/trainer_state.hpp"

namespace itrain {

/// Where the training loop gets its commands from at step boundaries.
class CommandSource {
public:
    virtual ~CommandSource() = default;

    /// Commands to apply now, in application order, already marked running.
    virtual std::vector<CommandEnvelope> poll(const TrainerState& state) = 0;

    /// Called while paused. Blocks up to `timeout` for new commands; returns
    /// false once no further command can ever arrive.
    virtual bool wait_for_commands(std::chrono::milliseconds timeout) = 0;

    virtual void resolve(const std::string& uuid, CommandStatus status, const std::string& detail) = 0;
};

class EventSink {
public:
    virtual ~EventSink() = default;
    virtual void publish(const TrainingEvent& event) = 0;
};

struct MetricRecord {
    std::uint64_t step = 0;
    double train_loss = 0.0;
    double grad_norm = 0.0;  // before clipping
    double lr = 0.0;
    std::optional<double> effective_grad_norm;  // after clipping, when clipping is configured
    std::optional<double> val_loss;
};

/// Result of applying one command. On failure the trainer state is untouched.
struct ApplyOutcome {
    CommandStatus status = CommandStatus::success;
    std::string detail;
    bool long_running = false;  // passes through `completed` before `success`
    std::vector<TrainingEvent> events;
};

struct TrainResult {
    TrainerState state;
    std::string reason;  // "completed", "stopped", "source_exhausted"
    std::uint64_t optimizer_updates = 0;
};

struct TrainerOptions {
    /// Checkpoints go to `<run_dir>/checkpoints`; interventions.jsonl is written
    /// there when `record_interventions` is set and run_dir is not empty.
    std::filesystem::path run_dir;
    bool record_interventions = true;
    std::chrono::milliseconds pause_poll{50};
};

/// Handler for a command registered beyond the built-ins. Mutates the state
/// and returns a detail string, or throws Error to fail the command.
using CommandHandler = std::function<std::string(TrainerState& state, const Json& args)>;

class Trainer {
public:
    Trainer(RunConfig config, CommandSource& source, EventSink& sink, TrainerOptions options);

    /// Runs until total_steps optimizer updates, a stop command, or the source
    /// running dry while paused. Emits training_ended.
    TrainResult run();

    /// Applies one running command to the state; events are returned, not published.
    ApplyOutcome apply_command(const CommandEnvelope& envelope);

    /// One optimizer update, or a fault pause. Returns the record when a step happened.
    std::optional<MetricRecord> step_once();

    /// Mean validation loss, dropout off; does not touch the state.
    [[nodiscard]] double evaluate() const;

    /// Called at every step boundary before commands are polled.
    void set_boundary_hook(std::function<void(const TrainerState&)> hook) { boundary_hook_ = std::move(hook); }

    // Sees every MLP training batch with its provenance, before the forward pass.
    void set_batch_hook(std::function<void(const TrainerState&, const std::vector<Example>&)> hook) {
        batch_hook_ = std::move(hook);
    }

    void register_handler(std::string command, CommandHandler handler);

    [[nodiscard]] TrainerState& state() noexcept { return state_; }
    [[nodiscard]] const TrainerState& state() const noexcept { return state_; }
    [[nodiscard]] const RunConfig& config() const noexcept { return config_; }
    [[nodiscard]] const BranchRegistry& branches() const noexcept { return branches_; }
    [[nodiscard]] const std::optional<InterventionLog>& intervention_log() const noexcept { return log_; }
    [[nodiscard]] std::uint64_t optimizer_updates() const noexcept { return updates_; }

private:
    void apply_and_resolve(const CommandEnvelope& envelope);
    void apply_builtin(CommandKind kind, const std::string& uuid_of_command, TrainerState& next, const Json& args,
                       ApplyOutcome& outcome);
    [[nodiscard]] double validation_loss(const TrainerState& state) const;
    [[nodiscard]] double scheduled_lr() const;
    [[nodiscard]] TrainingEvent make_event(EventType type, Json payload) const;
    void emit(EventType type, Json payload);

    RunConfig config_;
    std::string config_hash_;
    CommandSource& source_;
    EventSink& sink_;
    TrainerOptions options_;
    TrainerState state_;
    std::vector<Sample> validation_;
    BranchRegistry branches_;
    CheckpointStore checkpoints_;
    std::optional<InterventionLog> log_;
    std::function<void(const TrainerState&)> boundary_hook_;
    std::function<void(const TrainerState&, const std::vector<Example>&)> batch_hook_;
    std::map<std::string, CommandHandler, std::less<>> handlers_;
    std::uint64_t updates_ = 0;
};

/// Metric payload layout shared by the trainer and the log readers.
[[nodiscard]] Json metric_payload(const MetricRecord& record);

}  // namespace itrain
