// SPDX-License-Identifier: Apache-2.0
#include "itrain/server.hpp"

#include <algorithm>

#include "itrain/state.hpp"

namespace itrain {

std::string_view to_string(RunStatus status) noexcept {
    switch (status) {
    case RunStatus::idle: return "idle";
    case RunStatus::training: return "training";
    case RunStatus::paused: return "paused";
    case RunStatus::stopped: return "stopped";
    }
    return "unknown";
}

Json record_to_json(const CommandRecord& record) {
    Json timeline = Json::array();
    for (const auto& change : record.timeline) {
        Json c = {{"status", to_string(change.status)}, {"time", change.time}};
        if (!change.detail.empty()) {
            c["detail"] = change.detail;
        }
        timeline.push_back(std::move(c));
    }
    const auto& e = record.envelope;
    return {
        {"uuid", e.uuid},
        {"command", e.command},
        {"args", e.args},
        {"time", e.time},
        {"status", to_string(record.current())},
        {"category", to_string(record.category)},
        {"timeline", std::move(timeline)},
    };
}

Json ServerSnapshot::to_json() const {
    Json depths = Json::object();
    for (const auto& [category, depth] : queue_depths) {
        depths[std::string(itrain::to_string(category))] = depth;
    }
    Json hist = Json::array();
    for (const auto& record : history) {
        hist.push_back(record_to_json(record));
    }
    return {
        {"run_status", itrain::to_string(run_status)},
        {"step", step},
        {"branch_id", branch_id},
        {"queue_depths", std::move(depths)},
        {"history", std::move(hist)},
        {"branches", branches},
        {"checkpoints", checkpoints},
    };
}

Json SubmitResult::to_json() const {
    if (accepted) {
        return {{"uuid", uuid}, {"status", itrain::to_string(status)}};
    }
    Json j = {{"error", message}, {"code", error ? itrain::to_string(*error) : "rejected"}};
    if (!field.empty()) {
        j["field"] = field;
    }
    return j;
}

Subscription::Subscription(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

bool Subscription::push(EventType type, std::string frame) {
    std::function<void()> notify;
    bool alive = true;
    {
        std::lock_guard lock(mutex_);
        if (closed_) {
            return false;
        }
        notify = notify_;
        const bool droppable = is_droppable(type);
        bool keep = true;
        if (frames_.size() >= capacity_) {
            auto victim = std::find_if(frames_.begin(), frames_.end(), [](const Frame& f) { return f.droppable; });
            if (victim != frames_.end()) {
                frames_.erase(victim);
                ++dropped_;
            } else if (droppable) {
                ++dropped_;
                keep = false;
            } else if (frames_.size() >= 2 * capacity_) {
                closed_ = true;
                frames_.clear();
                alive = false;
                keep = false;
            }
        }
        if (keep) {
            frames_.push_back({droppable, std::move(frame)});
        }
    }
    if (alive) {
        ready_.notify_one();
    } else {
        ready_.notify_all();
    }
    if (notify) {
        notify();
    }
    return alive;
}

std::optional<std::string> Subscription::pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    ready_.wait_for(lock, timeout, [&] { return closed_ || !frames_.empty(); });
    if (frames_.empty()) {
        return std::nullopt;
    }
    std::string bytes = std::move(frames_.front().bytes);
    frames_.pop_front();
    return bytes;
}

void Subscription::close() {
    std::function<void()> notify;
    {
        std::lock_guard lock(mutex_);
        closed_ = true;
        notify = notify_;
    }
    ready_.notify_all();
    if (notify) {
        notify();
    }
}

void Subscription::set_notify(std::function<void()> notify) {
    std::lock_guard lock(mutex_);
    notify_ = std::move(notify);
}

bool Subscription::closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
}

std::size_t Subscription::size() const {
    std::lock_guard lock(mutex_);
    return frames_.size();
}

std::size_t Subscription::dropped() const {
    std::lock_guard lock(mutex_);
    return dropped_;
}

ControlServer::ControlServer(ServerOptions options)
    : options_(std::move(options)), registry_(options_.registry ? *options_.registry : default_registry()) {
    for (Category category : kDrainOrder) {
        queues_[category];
    }
    if (options_.run_dir) {
        std::filesystem::create_directories(*options_.run_dir / "metrics");
        history_file_.open(*options_.run_dir / "commands.jsonl", std::ios::app);
        if (!history_file_) {
            throw Error(ErrorCode::io_error, "cannot open command history in " + options_.run_dir->string());
        }
    }
}

ControlServer::~ControlServer() {
    shutdown();
    std::lock_guard lock(mutex_);
    for (auto& sub : subscribers_) {
        sub->close();
    }
}

SubmitResult ControlServer::submit_command(std::string_view raw) {
    SubmitResult result;
    CommandEnvelope envelope;
    try {
        envelope = decode_command(raw, registry_);
    } catch (const Error& e) {
        result.error = e.code();
        result.message = e.what();
        result.field = e.field();
        return result;
    }

    std::vector<TrainingEvent> events;
    {
        std::lock_guard lock(mutex_);
        auto reject = [&](ErrorCode code, std::string message, std::string field) {
            result.error = code;
            result.message = std::move(message);
            result.field = std::move(field);
            return result;
        };
        if (envelope.status != CommandStatus::requested) {
            return reject(ErrorCode::invalid_field, "status: new commands must be \"requested\"", "status");
        }
        if (index_.contains(envelope.uuid)) {
            return reject(ErrorCode::duplicate_uuid, "uuid: already submitted in this session", "uuid");
        }
        if (run_status_ == RunStatus::stopped) {
            return reject(ErrorCode::run_ended, "training has ended; no further commands are accepted", "command");
        }

        CommandRecord record;
        record.category = registry_.find(envelope.command)->category;
        record.envelope = envelope;
        record.timeline.push_back({CommandStatus::requested, envelope.time, {}});
        history_.push_back(std::move(record));
        index_.emplace(envelope.uuid, history_.size() - 1);

        CommandRecord& stored = history_.back();
        persist_status_locked(stored, stored.timeline.back());
        const TrainingEvent requested = status_event_locked(stored);
        broadcast_locked(requested);
        events.push_back(requested);
        transition_locked(stored, CommandStatus::pending, {}, events);
        queues_[stored.category].push_back(envelope.uuid);

        result.accepted = true;
        result.uuid = envelope.uuid;
        result.status = CommandStatus::pending;
    }
    commands_ready_.notify_all();
    notify_listeners(events);
    return result;
}

std::vector<CommandEnvelope> ControlServer::drain_locked(Category category, std::vector<TrainingEvent>& out) {
    std::vector<CommandEnvelope> drained;
    auto& queue = queues_[category];
    while (!queue.empty()) {
        CommandRecord& record = history_[index_.at(queue.front())];
        queue.pop_front();
        transition_locked(record, CommandStatus::running, {}, out);
        CommandEnvelope envelope = record.envelope;
        envelope.status = CommandStatus::running;
        drained.push_back(std::move(envelope));
    }
    return drained;
}

std::vector<CommandEnvelope> ControlServer::drain_category(Category category) {
    std::vector<TrainingEvent> events;
    std::vector<CommandEnvelope> drained;
    {
        std::lock_guard lock(mutex_);
        drained = drain_locked(category, events);
    }
    notify_listeners(events);
    return drained;
}

std::vector<CommandEnvelope> ControlServer::poll(const TrainerState& state) {
    std::vector<TrainingEvent> events;
    std::vector<CommandEnvelope> drained;
    {
        std::lock_guard lock(mutex_);
        last_step_ = state.step;
        active_branch_ = state.branch_id;
        for (Category category : kDrainOrder) {
            auto batch = drain_locked(category, events);
            std::move(batch.begin(), batch.end(), std::back_inserter(drained));
        }
    }
    notify_listeners(events);
    return drained;
}

bool ControlServer::wait_for_commands(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    commands_ready_.wait_for(lock, timeout, [&] {
        return shutdown_ || std::any_of(queues_.begin(), queues_.end(), [](const auto& q) { return !q.second.empty(); });
    });
    return !shutdown_;
}

void ControlServer::shutdown() {
    {
        std::lock_guard lock(mutex_);
        shutdown_ = true;
    }
    commands_ready_.notify_all();
}

void ControlServer::transition_locked(CommandRecord& record, CommandStatus status, std::string detail,
                                      std::vector<TrainingEvent>& out) {
    const CommandStatus from = record.current();
    if (!validate_transition(from, status)) {
        throw Error(ErrorCode::illegal_transition,
                    "illegal transition " + std::string(to_string(from)) + " -> " + std::string(to_string(status)) +
                        " for " + record.envelope.uuid,
                    "status");
    }
    record.timeline.push_back({status, unix_now(), std::move(detail)});
    persist_status_locked(record, record.timeline.back());
    TrainingEvent event = status_event_locked(record);
    broadcast_locked(event);
    out.push_back(std::move(event));
}

TrainingEvent ControlServer::status_event_locked(const CommandRecord& record) const {
    const StatusChange& change = record.timeline.back();
    Json payload = {{"uuid", record.envelope.uuid}, {"status", to_string(change.status)},
                    {"command", record.envelope.command}};
    if (!change.detail.empty()) {
        payload["detail"] = change.detail;
    }
    return TrainingEvent{EventType::command_status, last_step_, active_branch_, change.time, std::move(payload)};
}

void ControlServer::persist_status_locked(const CommandRecord& record, const StatusChange& change) {
    if (!history_file_.is_open()) {
        return;
    }
    Json line = {{"uuid", record.envelope.uuid}, {"status", to_string(change.status)}, {"time", change.time}};
    if (!change.detail.empty()) {
        line["detail"] = change.detail;
    }
    if (change.status == CommandStatus::requested) {
        line["envelope"] = Json::parse(encode_command(record.envelope));
    }
    history_file_ << line.dump() << '\n';
    history_file_.flush();
}

void ControlServer::broadcast_locked(const TrainingEvent& event) {
    if (subscribers_.empty()) {
        return;
    }
    const std::string frame = encode_event(event);
    std::erase_if(subscribers_, [&](const std::shared_ptr<Subscription>& sub) { return !sub->push(event.type, frame); });
}

std::ofstream& ControlServer::metric_file_locked(const std::string& name) {
    auto it = metric_files_.find(name);
    if (it == metric_files_.end()) {
        it = metric_files_.emplace(name, std::ofstream(*options_.run_dir / "metrics" / name, std::ios::app)).first;
    }
    return it->second;
}

void ControlServer::fail_pending_locked(const std::string& reason, std::vector<TrainingEvent>& out) {
    for (Category category : kDrainOrder) {
        auto& queue = queues_[category];
        while (!queue.empty()) {
            CommandRecord& record = history_[index_.at(queue.front())];
            queue.pop_front();
            transition_locked(record, CommandStatus::failed, reason, out);
        }
    }
}

void ControlServer::publish_event(const TrainingEvent& event) {
    std::vector<TrainingEvent> events{event};
    {
        std::lock_guard lock(mutex_);
        if (event.type != EventType::command_status) {
            last_step_ = event.step;
            active_branch_ = event.branch_id;
            if (run_status_ == RunStatus::idle) {
                run_status_ = RunStatus::training;
            }
        }
        switch (event.type) {
        case EventType::metric: {
            auto& log = metric_logs_[event.branch_id];
            log.push_back(event.payload);
            if (options_.run_dir) {
                auto& file = metric_file_locked(event.branch_id + ".jsonl");
                file << metric_line(event) << '\n';
                file.flush();
            }
            break;
        }
        case EventType::evaluation_result:
            eval_logs_[event.branch_id].push_back(event.payload);
            if (options_.run_dir) {
                auto& file = metric_file_locked(event.branch_id + ".eval.jsonl");
                file << metric_line(event) << '\n';
                file.flush();
            }
            break;
        case EventType::branch_created:
            branches_.push_back(event.payload);
            break;
        case EventType::checkpoint_saved:
            checkpoints_[event.payload.at("uuid").get<std::string>()] = event.payload;
            break;
        case EventType::training_ended:
            run_status_ = RunStatus::stopped;
            break;
        case EventType::log:
            if (event.payload.value("paused", false)) {
                run_status_ = RunStatus::paused;
            }
            break;
        default:
            break;
        }
        broadcast_locked(event);
        if (event.type == EventType::training_ended) {
            fail_pending_locked("training stopped", events);
        }
    }
    notify_listeners(events);
}

void ControlServer::resolve_command(const std::string& uuid, CommandStatus status, const std::string& detail) {
    std::vector<TrainingEvent> events;
    {
        std::lock_guard lock(mutex_);
        auto it = index_.find(uuid);
        if (it == index_.end()) {
            throw Error(ErrorCode::unknown_uuid, "unknown command uuid " + uuid, "uuid");
        }
        CommandRecord& record = history_[it->second];
        transition_locked(record, status, detail, events);
        if (status == CommandStatus::success && run_status_ != RunStatus::stopped) {
            if (record.envelope.command == "pause_training") {
                run_status_ = RunStatus::paused;
            } else if (record.envelope.command == "resume_training") {
                run_status_ = RunStatus::training;
            }
        }
    }
    notify_listeners(events);
}

ServerSnapshot ControlServer::snapshot_locked() const {
    ServerSnapshot snap;
    snap.run_status = run_status_;
    snap.step = last_step_;
    snap.branch_id = active_branch_;
    for (const auto& [category, queue] : queues_) {
        snap.queue_depths[category] = queue.size();
    }
    snap.history = history_;
    snap.branches = branches_;
    snap.checkpoints = checkpoints_;
    return snap;
}

ServerSnapshot ControlServer::snapshot_state() const {
    std::lock_guard lock(mutex_);
    return snapshot_locked();
}

std::shared_ptr<Subscription> ControlServer::subscribe(std::optional<std::size_t> capacity, bool with_snapshot) {
    auto sub = std::make_shared<Subscription>(capacity.value_or(options_.subscriber_capacity));
    std::lock_guard lock(mutex_);
    if (with_snapshot) {
        Json payload = snapshot_locked().to_json();
        Json metrics = Json::object();
        for (const auto& [branch, log] : metric_logs_) {
            metrics[branch] = log;
        }
        payload["metrics"] = std::move(metrics);
        const TrainingEvent event{EventType::state_snapshot, last_step_, active_branch_, unix_now(), std::move(payload)};
        sub->push(event.type, encode_event(event));
    }
    subscribers_.push_back(sub);
    return sub;
}

void ControlServer::unsubscribe(const std::shared_ptr<Subscription>& subscription) {
    std::lock_guard lock(mutex_);
    std::erase(subscribers_, subscription);
    subscription->close();
}

std::size_t ControlServer::subscriber_count() const {
    std::lock_guard lock(mutex_);
    return subscribers_.size();
}

void ControlServer::add_listener(Listener listener) {
    std::lock_guard lock(listeners_mutex_);
    listeners_.push_back(std::move(listener));
}

void ControlServer::notify_listeners(const std::vector<TrainingEvent>& events) {
    std::vector<Listener> listeners;
    {
        std::lock_guard lock(listeners_mutex_);
        listeners = listeners_;
    }
    for (const auto& event : events) {
        for (const auto& listener : listeners) {
            listener(event);
        }
    }
}

Json ControlServer::history_json() const {
    std::lock_guard lock(mutex_);
    Json out = Json::array();
    for (const auto& record : history_) {
        out.push_back(record_to_json(record));
    }
    return out;
}

Json ControlServer::branches_json() const {
    std::lock_guard lock(mutex_);
    return branches_;
}

std::optional<Json> ControlServer::metrics_json(std::string_view branch_id) const {
    std::lock_guard lock(mutex_);
    auto it = metric_logs_.find(branch_id);
    if (it == metric_logs_.end()) {
        const bool known = std::any_of(branches_.begin(), branches_.end(),
                                       [&](const Json& b) { return b.at("branch_id") == branch_id; });
        if (!known) {
            return std::nullopt;
        }
        return Json::array();
    }
    return Json(it->second);
}

Json ControlServer::evaluations_json(std::string_view branch_id) const {
    std::lock_guard lock(mutex_);
    auto it = eval_logs_.find(branch_id);
    return it == eval_logs_.end() ? Json::array() : Json(it->second);
}

RunStatus ControlServer::run_status() const {
    std::lock_guard lock(mutex_);
    return run_status_;
}

std::optional<CommandRecord> ControlServer::find_command(const std::string& uuid) const {
    std::lock_guard lock(mutex_);
    auto it = index_.find(uuid);
    if (it == index_.end()) {
        return std::nullopt;
    }
    return history_[it->second];
}

}  // namespace itrain
