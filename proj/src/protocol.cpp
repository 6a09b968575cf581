// SPDX-License-Identifier: Apache-2.0
#include "itrain/protocol.hpp"

#include <array>
#include <charconv>
#include <chrono>
#include <utility>

#include "itrain/codec.hpp"

namespace itrain {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::parse_error: return "parse_error";
    case ErrorCode::unknown_command: return "unknown_command";
    case ErrorCode::invalid_args: return "invalid_args";
    case ErrorCode::missing_field: return "missing_field";
    case ErrorCode::invalid_field: return "invalid_field";
    case ErrorCode::unknown_event: return "unknown_event";
    case ErrorCode::duplicate_uuid: return "duplicate_uuid";
    case ErrorCode::unknown_uuid: return "unknown_uuid";
    case ErrorCode::illegal_transition: return "illegal_transition";
    case ErrorCode::unknown_layer: return "unknown_layer";
    case ErrorCode::unknown_checkpoint: return "unknown_checkpoint";
    case ErrorCode::corrupt_checkpoint: return "corrupt_checkpoint";
    case ErrorCode::unknown_source: return "unknown_source";
    case ErrorCode::invalid_value: return "invalid_value";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::config_mismatch: return "config_mismatch";
    case ErrorCode::connection_error: return "connection_error";
    case ErrorCode::run_ended: return "run_ended";
    }
    return "unknown";
}

namespace {

constexpr std::array<std::pair<CommandKind, std::string_view>, 11> kCommandNames = {{
    {CommandKind::update_optimizer, "update_optimizer"},
    {CommandKind::save_checkpoint, "save_checkpoint"},
    {CommandKind::load_checkpoint, "load_checkpoint"},
    {CommandKind::pause_training, "pause_training"},
    {CommandKind::resume_training, "resume_training"},
    {CommandKind::stop_training, "stop_training"},
    {CommandKind::model_layer_operation, "model_layer_operation"},
    {CommandKind::model_layer_parameter_update, "model_layer_parameter_update"},
    {CommandKind::update_dataset, "update_dataset"},
    {CommandKind::update_dataset_runtime_hyperparameters, "update_dataset_runtime_hyperparameters"},
    {CommandKind::do_evaluate, "do_evaluate"},
}};

constexpr std::array<std::pair<CommandStatus, std::string_view>, 6> kStatusNames = {{
    {CommandStatus::requested, "requested"},
    {CommandStatus::pending, "pending"},
    {CommandStatus::running, "running"},
    {CommandStatus::completed, "completed"},
    {CommandStatus::success, "success"},
    {CommandStatus::failed, "failed"},
}};

constexpr std::array<std::pair<Category, std::string_view>, 6> kCategoryNames = {{
    {Category::control, "control"},
    {Category::checkpoint, "checkpoint"},
    {Category::optimizer, "optimizer"},
    {Category::model, "model"},
    {Category::dataset, "dataset"},
    {Category::evaluation, "evaluation"},
}};

constexpr std::array<std::pair<EventType, std::string_view>, 8> kEventNames = {{
    {EventType::metric, "metric"},
    {EventType::log, "log"},
    {EventType::command_status, "command_status"},
    {EventType::checkpoint_saved, "checkpoint_saved"},
    {EventType::branch_created, "branch_created"},
    {EventType::evaluation_result, "evaluation_result"},
    {EventType::training_ended, "training_ended"},
    {EventType::state_snapshot, "state_snapshot"},
}};

template <typename Enum, std::size_t N>
std::string_view name_of(const std::array<std::pair<Enum, std::string_view>, N>& table, Enum value) noexcept {
    for (const auto& [v, name] : table) {
        if (v == value) {
            return name;
        }
    }
    return "unknown";
}

template <typename Enum, std::size_t N>
std::optional<Enum> value_of(const std::array<std::pair<Enum, std::string_view>, N>& table,
                             std::string_view name) noexcept {
    for (const auto& [v, n] : table) {
        if (n == name) {
            return v;
        }
    }
    return std::nullopt;
}

[[noreturn]] void invalid_args(std::string field, std::string detail) {
    std::string message = field + ": " + detail;
    throw Error(ErrorCode::invalid_args, std::move(message), std::move(field));
}

void require_object(const Json& args) {
    if (!args.is_object()) {
        invalid_args("args", "must be a JSON object");
    }
}

void allow_only(const Json& args, std::initializer_list<std::string_view> keys) {
    for (const auto& [key, _] : args.items()) {
        bool known = false;
        for (auto k : keys) {
            known = known || key == k;
        }
        if (!known) {
            invalid_args("args." + key, "unexpected key");
        }
    }
}

const Json& require_key(const Json& args, const char* key) {
    auto it = args.find(key);
    if (it == args.end()) {
        invalid_args(std::string("args.") + key, "is required");
    }
    return *it;
}

void require_string(const Json& args, const char* key) {
    const Json& v = require_key(args, key);
    if (!v.is_string() || v.get_ref<const std::string&>().empty()) {
        invalid_args(std::string("args.") + key, "must be a non-empty string");
    }
}

void require_number(const Json& args, const char* key) {
    if (!require_key(args, key).is_number()) {
        invalid_args(std::string("args.") + key, "must be a number");
    }
}

void validate_empty(const Json& args) {
    require_object(args);
    allow_only(args, {});
}

void validate_update_optimizer(const Json& args) {
    require_object(args);
    allow_only(args, {"lr", "momentum", "weight_decay", "grad_clip"});
    if (args.empty()) {
        invalid_args("args", "at least one of lr, momentum, weight_decay, grad_clip is required");
    }
    for (const auto& [key, entry] : args.items()) {
        const std::string field = "args." + key + ".value";
        if (!entry.is_object() || !entry.contains("value")) {
            invalid_args("args." + key, "must be an object with a \"value\" key");
        }
        const Json& v = entry.at("value");
        if (key == "grad_clip" && v.is_null()) {
            continue;
        }
        if (!v.is_number()) {
            invalid_args(field, "must be a number");
        }
        const double x = v.get<double>();
        if (key == "lr" && !(x > 0.0)) {
            invalid_args(field, "must be > 0");
        } else if (key == "momentum" && !(x >= 0.0 && x < 1.0)) {
            invalid_args(field, "must be in [0, 1)");
        } else if (key == "weight_decay" && !(x >= 0.0)) {
            invalid_args(field, "must be >= 0");
        } else if (key == "grad_clip" && !(x > 0.0)) {
            invalid_args(field, "must be > 0 or null");
        }
    }
}

void validate_load_checkpoint(const Json& args) {
    require_object(args);
    allow_only(args, {"uuid"});
    require_string(args, "uuid");
}

void validate_layer_operation(const Json& args) {
    require_object(args);
    allow_only(args, {"layer", "op"});
    require_string(args, "layer");
    require_string(args, "op");
    const auto& op = args.at("op").get_ref<const std::string&>();
    if (op != "reset" && op != "reinitialize") {
        invalid_args("args.op", "must be \"reset\" or \"reinitialize\"");
    }
}

void validate_layer_parameter_update(const Json& args) {
    require_object(args);
    allow_only(args, {"layer", "param", "value"});
    require_string(args, "layer");
    require_string(args, "param");
    require_number(args, "value");
}

void validate_update_dataset(const Json& args) {
    require_object(args);
    allow_only(args, {"source", "data_path"});
    require_string(args, "source");
    require_string(args, "data_path");
}

void validate_dataset_hyperparameters(const Json& args) {
    require_object(args);
    allow_only(args, {"weights"});
    const Json& weights = require_key(args, "weights");
    if (!weights.is_object() || weights.empty()) {
        invalid_args("args.weights", "must be a non-empty object");
    }
    for (const auto& [name, w] : weights.items()) {
        if (!w.is_number() || !(w.get<double>() >= 0.0)) {
            invalid_args("args.weights." + name, "must be a number >= 0");
        }
    }
}

CommandRegistry::ArgsValidator validator_for(CommandKind kind) {
    switch (kind) {
    case CommandKind::update_optimizer: return validate_update_optimizer;
    case CommandKind::load_checkpoint: return validate_load_checkpoint;
    case CommandKind::model_layer_operation: return validate_layer_operation;
    case CommandKind::model_layer_parameter_update: return validate_layer_parameter_update;
    case CommandKind::update_dataset: return validate_update_dataset;
    case CommandKind::update_dataset_runtime_hyperparameters: return validate_dataset_hyperparameters;
    case CommandKind::save_checkpoint:
    case CommandKind::pause_training:
    case CommandKind::resume_training:
    case CommandKind::stop_training:
    case CommandKind::do_evaluate: return validate_empty;
    }
    return validate_empty;
}

std::string json_string(std::string_view s) {
    return Json(s).dump();
}

const Json& require_member(const Json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw Error(ErrorCode::missing_field, std::string("missing field: ") + key, key);
    }
    return *it;
}

std::string require_string_member(const Json& obj, const char* key) {
    const Json& v = require_member(obj, key);
    if (!v.is_string()) {
        throw Error(ErrorCode::invalid_field, std::string(key) + ": must be a string", key);
    }
    return v.get<std::string>();
}

double require_number_member(const Json& obj, const char* key) {
    const Json& v = require_member(obj, key);
    if (!v.is_number()) {
        throw Error(ErrorCode::invalid_field, std::string(key) + ": must be a number", key);
    }
    return v.get<double>();
}

Json parse_object(std::string_view raw, const char* what) {
    Json j;
    try {
        j = Json::parse(raw);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::parse_error, std::string(what) + ": malformed JSON: " + e.what(), what);
    }
    if (!j.is_object()) {
        throw Error(ErrorCode::parse_error, std::string(what) + ": must be a JSON object", what);
    }
    return j;
}

void validate_payload(EventType type, const Json& payload) {
    auto need = [&](const char* key, auto pred, const char* what) {
        auto it = payload.find(key);
        if (it == payload.end()) {
            throw Error(ErrorCode::missing_field, std::string("payload.") + key + " is required",
                        std::string("payload.") + key);
        }
        if (!pred(*it)) {
            throw Error(ErrorCode::invalid_field, std::string("payload.") + key + ": must be " + what,
                        std::string("payload.") + key);
        }
    };
    auto number = [](const Json& v) { return v.is_number(); };
    auto string = [](const Json& v) { return v.is_string(); };
    auto step = [](const Json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); };
    switch (type) {
    case EventType::metric:
        need("train_loss", number, "a number");
        need("grad_norm", number, "a number");
        need("lr", number, "a number");
        break;
    case EventType::command_status:
        need("uuid", string, "a string");
        need("status", [](const Json& v) { return v.is_string() && parse_command_status(v.get<std::string>()); },
             "a command status");
        break;
    case EventType::evaluation_result:
        need("val_loss", number, "a number");
        need("step", step, "a non-negative integer");
        break;
    case EventType::checkpoint_saved:
        need("uuid", string, "a string");
        need("step", step, "a non-negative integer");
        need("branch_id", string, "a string");
        break;
    case EventType::branch_created:
        need("branch_id", string, "a string");
        need("parent_branch_id", [](const Json& v) { return v.is_string() || v.is_null(); }, "a string or null");
        need("fork_step", step, "a non-negative integer");
        break;
    case EventType::log:
        need("level", string, "a string");
        need("message", string, "a string");
        break;
    case EventType::training_ended:
        need("reason", string, "a string");
        break;
    case EventType::state_snapshot:
        break;
    }
}

}  // namespace

std::string_view to_string(CommandKind kind) noexcept { return name_of(kCommandNames, kind); }
std::optional<CommandKind> parse_command_kind(std::string_view name) noexcept { return value_of(kCommandNames, name); }
std::string_view to_string(CommandStatus status) noexcept { return name_of(kStatusNames, status); }
std::optional<CommandStatus> parse_command_status(std::string_view name) noexcept { return value_of(kStatusNames, name); }
std::string_view to_string(Category category) noexcept { return name_of(kCategoryNames, category); }
std::optional<Category> parse_category(std::string_view name) noexcept { return value_of(kCategoryNames, name); }
std::string_view to_string(EventType type) noexcept { return name_of(kEventNames, type); }
std::optional<EventType> parse_event_type(std::string_view name) noexcept { return value_of(kEventNames, name); }

Category category_of(CommandKind kind) noexcept {
    switch (kind) {
    case CommandKind::update_optimizer: return Category::optimizer;
    case CommandKind::save_checkpoint:
    case CommandKind::load_checkpoint: return Category::checkpoint;
    case CommandKind::pause_training:
    case CommandKind::resume_training:
    case CommandKind::stop_training: return Category::control;
    case CommandKind::model_layer_operation:
    case CommandKind::model_layer_parameter_update: return Category::model;
    case CommandKind::update_dataset:
    case CommandKind::update_dataset_runtime_hyperparameters: return Category::dataset;
    case CommandKind::do_evaluate: return Category::evaluation;
    }
    return Category::control;
}

CommandRegistry CommandRegistry::builtin() {
    CommandRegistry registry;
    for (CommandKind kind : kAllCommandKinds) {
        registry.add(std::string(to_string(kind)), category_of(kind), validator_for(kind));
    }
    return registry;
}

void CommandRegistry::add(std::string name, Category category, ArgsValidator validate) {
    entries_.insert_or_assign(std::move(name), Entry{category, std::move(validate)});
}

const CommandRegistry::Entry* CommandRegistry::find(std::string_view name) const {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : &it->second;
}

const CommandRegistry& default_registry() {
    static const CommandRegistry registry = CommandRegistry::builtin();
    return registry;
}

std::string format_timestamp(double seconds) {
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), seconds, std::chars_format::fixed);
    if (ec != std::errc{}) {
        throw Error(ErrorCode::invalid_value, "timestamp not representable", "time");
    }
    std::string text(buf.data(), end);
    auto dot = text.find('.');
    if (dot == std::string::npos) {
        text += '.';
        dot = text.size() - 1;
    }
    while (text.size() - dot - 1 < 3) {
        text += '0';
    }
    return text;
}

double unix_now() {
    using namespace std::chrono;
    return duration<double>(system_clock::now().time_since_epoch()).count();
}

std::string encode_command(const CommandEnvelope& envelope) {
    std::string out;
    out.reserve(96 + envelope.args.size() * 2);
    out += "{\"command\": ";
    out += json_string(envelope.command);
    out += ", \"args\": ";
    out += json_string(envelope.args);
    out += ", \"time\": ";
    out += format_timestamp(envelope.time);
    out += ", \"uuid\": ";
    out += json_string(envelope.uuid);
    out += ", \"status\": ";
    out += json_string(to_string(envelope.status));
    out += '}';
    return out;
}

void validate_envelope(const CommandEnvelope& envelope, const CommandRegistry& registry) {
    const auto* entry = registry.find(envelope.command);
    if (entry == nullptr) {
        throw Error(ErrorCode::unknown_command, "command: unknown command \"" + envelope.command + "\"", "command");
    }
    Json args;
    try {
        args = Json::parse(envelope.args);
    } catch (const Json::parse_error&) {
        throw Error(ErrorCode::invalid_args, "args: not valid JSON", "args");
    }
    if (!args.is_object()) {
        throw Error(ErrorCode::invalid_args, "args: must encode a JSON object", "args");
    }
    if (entry->validate) {
        entry->validate(args);
    }
    if (envelope.uuid.empty() || envelope.uuid.size() > 128) {
        throw Error(ErrorCode::invalid_field, "uuid: must be 1..128 characters", "uuid");
    }
}

CommandEnvelope decode_command(std::string_view raw, const CommandRegistry& registry) {
    const Json j = parse_object(raw, "envelope");

    std::string missing;
    for (const char* key : {"command", "args", "time", "uuid"}) {
        if (!j.contains(key)) {
            missing += missing.empty() ? key : std::string(", ") + key;
        }
    }
    if (!missing.empty()) {
        throw Error(ErrorCode::missing_field, "missing fields: " + missing, missing);
    }

    CommandEnvelope envelope;
    envelope.command = require_string_member(j, "command");
    envelope.args = require_string_member(j, "args");
    envelope.time = require_number_member(j, "time");
    envelope.uuid = require_string_member(j, "uuid");
    if (auto it = j.find("status"); it != j.end()) {
        if (!it->is_string()) {
            throw Error(ErrorCode::invalid_field, "status: must be a string", "status");
        }
        auto status = parse_command_status(it->get<std::string>());
        if (!status) {
            throw Error(ErrorCode::invalid_field, "status: unknown status \"" + it->get<std::string>() + "\"", "status");
        }
        envelope.status = *status;
    }
    validate_envelope(envelope, registry);
    return envelope;
}

CommandEnvelope make_envelope(std::string command, const Json& args) {
    CommandEnvelope envelope;
    envelope.command = std::move(command);
    envelope.args = args.dump();
    envelope.time = unix_now();
    envelope.uuid = random_uuid();
    envelope.status = CommandStatus::requested;
    return envelope;
}

std::string encode_event(const TrainingEvent& event) {
    std::string out;
    out += "{\"event_type\":";
    out += json_string(to_string(event.type));
    out += ",\"step\":";
    out += std::to_string(event.step);
    out += ",\"branch_id\":";
    out += json_string(event.branch_id);
    out += ",\"time\":";
    out += format_timestamp(event.time);
    out += ",\"payload\":";
    out += event.payload.dump();
    out += '}';
    return out;
}

TrainingEvent decode_event(std::string_view raw) {
    const Json j = parse_object(raw, "event");
    TrainingEvent event;

    const std::string type_name = require_string_member(j, "event_type");
    auto type = parse_event_type(type_name);
    if (!type) {
        throw Error(ErrorCode::unknown_event, "event_type: unknown event type \"" + type_name + "\"", "event_type");
    }
    event.type = *type;

    const Json& step = require_member(j, "step");
    if (step.is_number_unsigned()) {
        event.step = step.get<std::uint64_t>();
    } else {
        throw Error(ErrorCode::invalid_field, "step: must be a non-negative integer", "step");
    }
    event.branch_id = require_string_member(j, "branch_id");
    event.time = require_number_member(j, "time");
    const Json& payload = require_member(j, "payload");
    if (!payload.is_object()) {
        throw Error(ErrorCode::invalid_field, "payload: must be an object", "payload");
    }
    validate_payload(event.type, payload);
    event.payload = payload;
    return event;
}

}  // namespace itrain
