// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "itrain/error.hpp"

namespace itrain {

using Json = nlohmann::json;

enum class CommandKind {
    update_optimizer,
    save_checkpoint,
    load_checkpoint,
    pause_training,
    resume_training,
    stop_training,
    model_layer_operation,
    model_layer_parameter_update,
    update_dataset,
    update_dataset_runtime_hyperparameters,
    do_evaluate,
};

inline constexpr std::array<CommandKind, 11> kAllCommandKinds = {
    CommandKind::update_optimizer,
    CommandKind::save_checkpoint,
    CommandKind::load_checkpoint,
    CommandKind::pause_training,
    CommandKind::resume_training,
    CommandKind::stop_training,
    CommandKind::model_layer_operation,
    CommandKind::model_layer_parameter_update,
    CommandKind::update_dataset,
    CommandKind::update_dataset_runtime_hyperparameters,
    CommandKind::do_evaluate,
};

[[nodiscard]] std::string_view to_string(CommandKind kind) noexcept;
[[nodiscard]] std::optional<CommandKind> parse_command_kind(std::string_view name) noexcept;

enum class CommandStatus { requested, pending, running, completed, success, failed };

inline constexpr std::array<CommandStatus, 6> kAllStatuses = {
    CommandStatus::requested, CommandStatus::pending, CommandStatus::running,
    CommandStatus::completed, CommandStatus::success, CommandStatus::failed,
};

[[nodiscard]] std::string_view to_string(CommandStatus status) noexcept;
[[nodiscard]] std::optional<CommandStatus> parse_command_status(std::string_view name) noexcept;

/// Lifecycle edges:
///   requested -> pending -> running -> {success, failed, completed}
///   pending -> failed, completed -> {success, failed}
[[nodiscard]] constexpr bool validate_transition(CommandStatus from, CommandStatus to) noexcept {
    using S = CommandStatus;
    switch (from) {
    case S::requested: return to == S::pending;
    case S::pending: return to == S::running || to == S::failed;
    case S::running: return to == S::success || to == S::failed || to == S::completed;
    case S::completed: return to == S::success || to == S::failed;
    case S::success:
    case S::failed: return false;
    }
    return false;
}

[[nodiscard]] constexpr bool is_terminal(CommandStatus status) noexcept {
    return status == CommandStatus::success || status == CommandStatus::failed;
}

/// Trainer-side queue a command is routed to.
enum class Category { control, checkpoint, optimizer, model, dataset, evaluation };

/// Order in which the trainer drains categories at a step boundary.
inline constexpr std::array<Category, 6> kDrainOrder = {
    Category::control, Category::checkpoint, Category::optimizer,
    Category::model,   Category::dataset,    Category::evaluation,
};

[[nodiscard]] std::string_view to_string(Category category) noexcept;
[[nodiscard]] std::optional<Category> parse_category(std::string_view name) noexcept;
[[nodiscard]] Category category_of(CommandKind kind) noexcept;

/// Wire-format intervention message. `args` holds serialized JSON text and is
/// emitted as a JSON string, so the object is double-encoded on the wire.
struct CommandEnvelope {
    std::string command;
    std::string args = "{}";
    double time = 0.0;
    std::string uuid;
    CommandStatus status = CommandStatus::requested;

    [[nodiscard]] Json args_json() const { return Json::parse(args); }
    [[nodiscard]] std::optional<CommandKind> kind() const noexcept { return parse_command_kind(command); }

    friend bool operator==(const CommandEnvelope&, const CommandEnvelope&) = default;
};

/// Maps command names to their queue category and args validator. New
/// commands are added with `add` without touching the codec.
class CommandRegistry {
public:
    /// Throws Error(invalid_args, ..., field) when args do not satisfy the schema.
    using ArgsValidator = std::function<void(const Json& args)>;

    struct Entry {
        Category category;
        ArgsValidator validate;
    };

    CommandRegistry() = default;

    /// Registry holding the eleven built-in commands.
    [[nodiscard]] static CommandRegistry builtin();

    void add(std::string name, Category category, ArgsValidator validate);
    [[nodiscard]] const Entry* find(std::string_view name) const;
    [[nodiscard]] bool contains(std::string_view name) const { return find(name) != nullptr; }

private:
    std::map<std::string, Entry, std::less<>> entries_;
};

[[nodiscard]] const CommandRegistry& default_registry();

[[nodiscard]] std::string encode_command(const CommandEnvelope& envelope);

/// Missing status defaults to `requested`. Throws Error naming the bad field.
[[nodiscard]] CommandEnvelope decode_command(std::string_view raw,
                                             const CommandRegistry& registry = default_registry());

/// Checks the envelope invariants (known command, args object + schema, uuid shape).
void validate_envelope(const CommandEnvelope& envelope,
                       const CommandRegistry& registry = default_registry());

/// Builds a fresh `requested` envelope with a random uuid and the current time.
[[nodiscard]] CommandEnvelope make_envelope(std::string command, const Json& args);

enum class EventType {
    metric,
    log,
    command_status,
    checkpoint_saved,
    branch_created,
    evaluation_result,
    training_ended,
    state_snapshot,
};

[[nodiscard]] std::string_view to_string(EventType type) noexcept;
[[nodiscard]] std::optional<EventType> parse_event_type(std::string_view name) noexcept;

/// Lifecycle events are never dropped by subscriber backpressure.
[[nodiscard]] constexpr bool is_droppable(EventType type) noexcept {
    return type == EventType::metric || type == EventType::log;
}

struct TrainingEvent {
    EventType type = EventType::log;
    std::uint64_t step = 0;
    std::string branch_id;
    double time = 0.0;
    Json payload = Json::object();

    friend bool operator==(const TrainingEvent&, const TrainingEvent&) = default;
};

[[nodiscard]] std::string encode_event(const TrainingEvent& event);
[[nodiscard]] TrainingEvent decode_event(std::string_view raw);

/// Shortest round-trip decimal rendering of a timestamp, padded to at least
/// three fractional digits.
[[nodiscard]] std::string format_timestamp(double seconds);

[[nodiscard]] double unix_now();

}  // namespace itrain
