// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "itrain/protocol.hpp"
#include "itrain/trainer.hpp"

namespace itrain {

enum class RunStatus { idle, training, paused, stopped };

[[nodiscard]] std::string_view to_string(RunStatus status) noexcept;

struct StatusChange {
    CommandStatus status;
    double time = 0.0;
    std::string detail;
};

struct CommandRecord {
    CommandEnvelope envelope;
    Category category = Category::control;
    std::vector<StatusChange> timeline;

    [[nodiscard]] CommandStatus current() const { return timeline.back().status; }
};

struct ServerSnapshot {
    RunStatus run_status = RunStatus::idle;
    std::uint64_t step = 0;
    std::string branch_id;
    std::map<Category, std::size_t> queue_depths;
    std::vector<CommandRecord> history;
    Json branches = Json::array();
    Json checkpoints = Json::object();

    [[nodiscard]] Json to_json() const;
};

[[nodiscard]] Json record_to_json(const CommandRecord& record);

/// Bounded per-subscriber event buffer. When full, the oldest metric/log
/// frame is dropped; lifecycle frames are never dropped. A subscriber that
/// keeps overflowing with nothing left to drop is detached.
class Subscription {
public:
    explicit Subscription(std::size_t capacity);

    /// Returns false once the subscription is detached.
    bool push(EventType type, std::string frame);

    /// Next frame, or nullopt on timeout or after detach with an empty buffer.
    std::optional<std::string> pop(std::chrono::milliseconds timeout);

    void close();
    [[nodiscard]] bool closed() const;
    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::size_t dropped() const;
    [[nodiscard]] std::size_t capacity() const noexcept { return capacity_; }

    /// Called after every push or detach, outside the subscription lock.
    void set_notify(std::function<void()> notify);

private:
    struct Frame {
        bool droppable;
        std::string bytes;
    };

    mutable std::mutex mutex_;
    std::condition_variable ready_;
    std::deque<Frame> frames_;
    std::size_t capacity_;
    std::size_t dropped_ = 0;
    bool closed_ = false;
    std::function<void()> notify_;
};

struct SubmitResult {
    bool accepted = false;
    std::string uuid;
    CommandStatus status = CommandStatus::pending;
    std::optional<ErrorCode> error;
    std::string message;
    std::string field;

    [[nodiscard]] Json to_json() const;
};

struct ServerOptions {
    /// When set, command history goes to commands.jsonl and metric logs to
    /// metrics/<branch>.jsonl (and .eval.jsonl) under this directory.
    std::optional<std::filesystem::path> run_dir;
    std::size_t subscriber_capacity = 1024;
    const CommandRegistry* registry = nullptr;  // default_registry() when null
};

/// Hub between clients and the trainer. All public operations are safe to
/// call concurrently; drain/poll assume a single consumer.
class ControlServer final : public CommandSource, public EventSink {
public:
    using Listener = std::function<void(const TrainingEvent&)>;

    explicit ControlServer(ServerOptions options = {});
    ~ControlServer() override;

    ControlServer(const ControlServer&) = delete;
    ControlServer& operator=(const ControlServer&) = delete;

    SubmitResult submit_command(std::string_view raw);
    SubmitResult submit(const CommandEnvelope& envelope) { return submit_command(encode_command(envelope)); }

    /// Pending commands of one category in FIFO order, each moved to running.
    std::vector<CommandEnvelope> drain_category(Category category);

    void publish_event(const TrainingEvent& event);

    /// Throws Error(unknown_uuid) or Error(illegal_transition).
    void resolve_command(const std::string& uuid, CommandStatus status, const std::string& detail = {});

    [[nodiscard]] ServerSnapshot snapshot_state() const;

    /// With `with_snapshot`, a state_snapshot frame (including all metric
    /// logs) is queued first, atomically with registration.
    [[nodiscard]] std::shared_ptr<Subscription> subscribe(std::optional<std::size_t> capacity = std::nullopt,
                                                          bool with_snapshot = false);
    void unsubscribe(const std::shared_ptr<Subscription>& subscription);
    [[nodiscard]] std::size_t subscriber_count() const;

    /// In-process observers, called on the publishing thread after the
    /// server lock is released.
    void add_listener(Listener listener);

    [[nodiscard]] Json history_json() const;
    [[nodiscard]] Json branches_json() const;
    [[nodiscard]] std::optional<Json> metrics_json(std::string_view branch_id) const;
    [[nodiscard]] Json evaluations_json(std::string_view branch_id) const;
    [[nodiscard]] RunStatus run_status() const;
    [[nodiscard]] std::optional<CommandRecord> find_command(const std::string& uuid) const;

    /// Wakes a paused trainer and makes wait_for_commands return false.
    void shutdown();

    // CommandSource
    std::vector<CommandEnvelope> poll(const TrainerState& state) override;
    bool wait_for_commands(std::chrono::milliseconds timeout) override;
    void resolve(const std::string& uuid, CommandStatus status, const std::string& detail) override {
        resolve_command(uuid, status, detail);
    }

    // EventSink
    void publish(const TrainingEvent& event) override { publish_event(event); }

private:
    std::vector<CommandEnvelope> drain_locked(Category category, std::vector<TrainingEvent>& out);
    void transition_locked(CommandRecord& record, CommandStatus status, std::string detail,
                           std::vector<TrainingEvent>& out);
    void broadcast_locked(const TrainingEvent& event);
    void persist_status_locked(const CommandRecord& record, const StatusChange& change);
    void fail_pending_locked(const std::string& reason, std::vector<TrainingEvent>& out);
    void notify_listeners(const std::vector<TrainingEvent>& events);
    [[nodiscard]] TrainingEvent status_event_locked(const CommandRecord& record) const;
    std::ofstream& metric_file_locked(const std::string& name);
    [[nodiscard]] ServerSnapshot snapshot_locked() const;

    ServerOptions options_;
    const CommandRegistry& registry_;

    mutable std::mutex mutex_;
    std::condition_variable commands_ready_;
    bool shutdown_ = false;

    RunStatus run_status_ = RunStatus::idle;
    std::uint64_t last_step_ = 0;
    std::string active_branch_ = "b0";

    std::vector<CommandRecord> history_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::map<Category, std::deque<std::string>> queues_;  // uuids

    std::vector<std::shared_ptr<Subscription>> subscribers_;
    std::vector<Listener> listeners_;
    mutable std::mutex listeners_mutex_;

    Json branches_ = Json::array();
    Json checkpoints_ = Json::object();
    std::map<std::string, std::vector<Json>, std::less<>> metric_logs_;
    std::map<std::string, std::vector<Json>, std::less<>> eval_logs_;

    std::ofstream history_file_;
    std::map<std::string, std::ofstream> metric_files_;
};

}  // namespace itrain
