// SPDX-License-Identifier: Apache-2.0
#include "itrain/trainer.hpp"

#include <cmath>
#include <thread>

#include "itrain/codec.hpp"
#include "itrain/error.hpp"

namespace itrain {

namespace {

// Separates the parameter/batch stream from the data stream of the same seed.
constexpr std::uint64_t kTrainerStream = 0x5851f42d4c957f2dULL;

std::vector<Sample> generate_sin_samples(Rng& rng, std::size_t n, double noise_std) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = rng.uniform(-1.0, 1.0);
        const double y = std::sin(3.0 * x) + noise_std * rng.normal();
        out.push_back({x, y});
    }
    return out;
}

}  // namespace

TrainerState initial_state(const RunConfig& config) {
    TrainerState state;
    state.rng = Rng(config.seed ^ kTrainerStream);
    if (config.task == TaskKind::quadratic) {
        state.model = make_quadratic_model(config.w0);
    } else {
        Rng data_rng(config.seed);
        state.dataset.update_data(kDefaultSource, generate_sin_samples(data_rng, config.train_size, config.noise_std));
        state.model = make_mlp_model(config.hidden_width, state.rng);
    }
    state.optimizer.lr = config.lr0;
    state.optimizer.momentum = config.momentum;
    state.optimizer.weight_decay = config.weight_decay;
    state.optimizer.grad_clip = config.grad_clip;
    state.optimizer.velocity = zeros_like(state.model);
    state.eval_cadence = config.eval_cadence;
    state.schedule_active = config.schedule == LrSchedule::linear;
    return state;
}

std::vector<Sample> validation_set(const RunConfig& config) {
    if (config.task == TaskKind::quadratic) {
        return {};
    }
    Rng data_rng(config.seed);
    (void)generate_sin_samples(data_rng, config.train_size, config.noise_std);
    return generate_sin_samples(data_rng, config.val_size, config.noise_std);
}

Json metric_payload(const MetricRecord& record) {
    Json payload = {
        {"step", record.step},
        {"train_loss", record.train_loss},
        {"grad_norm", record.grad_norm},
        {"lr", record.lr},
    };
    if (record.effective_grad_norm) {
        payload["effective_grad_norm"] = *record.effective_grad_norm;
    }
    if (record.val_loss) {
        payload["val_loss"] = *record.val_loss;
    }
    return payload;
}

Trainer::Trainer(RunConfig config, CommandSource& source, EventSink& sink, TrainerOptions options)
    : config_(std::move(config)),
      config_hash_(config_.identity_hash()),
      source_(source),
      sink_(sink),
      options_(std::move(options)),
      state_(initial_state(config_)),
      validation_(validation_set(config_)),
      checkpoints_(options_.run_dir / "checkpoints") {
    if (options_.record_interventions && !options_.run_dir.empty()) {
        log_ = InterventionLog::create(options_.run_dir / "interventions.jsonl", config_hash_);
    }
}

void Trainer::register_handler(std::string command, CommandHandler handler) {
    handlers_.insert_or_assign(std::move(command), std::move(handler));
}

TrainingEvent Trainer::make_event(EventType type, Json payload) const {
    return TrainingEvent{type, state_.step, state_.branch_id, unix_now(), std::move(payload)};
}

void Trainer::emit(EventType type, Json payload) {
    sink_.publish(make_event(type, std::move(payload)));
}

double Trainer::scheduled_lr() const {
    const double remaining = static_cast<double>(config_.total_steps - std::min(state_.step, config_.total_steps));
    return config_.lr0 * remaining / static_cast<double>(config_.total_steps);
}

double Trainer::evaluate() const {
    return validation_loss(state_);
}

double Trainer::validation_loss(const TrainerState& state) const {
    if (config_.task == TaskKind::quadratic) {
        return quadratic_loss_and_grad(state.model, config_.lambda).loss;
    }
    return mlp_mean_loss(state.model, validation_);
}

std::optional<MetricRecord> Trainer::step_once() {
    if (state_.schedule_active) {
        state_.optimizer.lr = scheduled_lr();
    }

    LossAndGrads lg;
    if (config_.task == TaskKind::quadratic) {
        lg = quadratic_loss_and_grad(state_.model, config_.lambda);
    } else {
        const auto batch = state_.dataset.next_batch(config_.batch_size, state_.rng);
        if (batch_hook_) {
            batch_hook_(state_, batch);
        }
        std::vector<Sample> samples;
        samples.reserve(batch.size());
        for (const auto& e : batch) {
            samples.push_back(e.sample);
        }
        lg = mlp_loss_and_grad(state_.model, samples, &state_.rng);
    }

    MetricRecord record;
    record.train_loss = lg.loss;
    record.lr = state_.optimizer.lr;
    try {
        if (!std::isfinite(lg.loss) || !all_finite(lg.grads)) {
            throw Error(ErrorCode::non_finite, "non-finite loss or gradient");
        }
        record.grad_norm = global_norm(lg.grads);
        ParamBuffers grads = std::move(lg.grads);
        if (state_.optimizer.grad_clip) {
            auto clipped = clip_gradients(std::move(grads), *state_.optimizer.grad_clip);
            grads = std::move(clipped.grads);
            record.effective_grad_norm = global_norm(grads);
        }
        auto next = sgd_momentum_step(state_.model, grads, state_.optimizer);
        state_.model = std::move(next.model);
        state_.optimizer = std::move(next.optimizer);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::non_finite) {
            throw;
        }
        state_.paused = true;
        emit(EventType::log, {{"level", "warning"}, {"message", "Gradient overflow detected"}});
        emit(EventType::log, {{"level", "warning"},
                              {"message", "Training paused at step " + std::to_string(state_.step) +
                                              "; reset a layer or load a checkpoint, then resume"},
                              {"paused", true}});
        return std::nullopt;
    }

    ++state_.step;
    ++updates_;
    record.step = state_.step;
    emit(EventType::metric, metric_payload(record));

    if (state_.eval_cadence > 0 && state_.step % state_.eval_cadence == 0) {
        const double val = evaluate();
        record.val_loss = val;
        emit(EventType::evaluation_result, {{"val_loss", val}, {"step", state_.step}});
    }
    return record;
}

ApplyOutcome Trainer::apply_command(const CommandEnvelope& envelope) {
    ApplyOutcome outcome;
    TrainerState next = state_;
    try {
        const Json args = envelope.args_json();
        if (const auto* entry = default_registry().find(envelope.command); entry != nullptr && entry->validate) {
            entry->validate(args);
        }
        if (auto kind = envelope.kind()) {
            apply_builtin(*kind, envelope.uuid, next, args, outcome);
        } else if (auto it = handlers_.find(envelope.command); it != handlers_.end()) {
            outcome.detail = it->second(next, args);
        } else {
            throw Error(ErrorCode::unknown_command, "no handler registered for \"" + envelope.command + "\"");
        }
    } catch (const Error& e) {
        outcome.status = CommandStatus::failed;
        outcome.detail = e.what();
        outcome.long_running = false;
        outcome.events.clear();
        return outcome;
    } catch (const Json::exception& e) {
        outcome.status = CommandStatus::failed;
        outcome.detail = std::string("invalid args: ") + e.what();
        outcome.long_running = false;
        outcome.events.clear();
        return outcome;
    }
    state_ = std::move(next);
    return outcome;
}

void Trainer::apply_builtin(CommandKind kind, const std::string& uuid_of_command, TrainerState& next, const Json& args,
                            ApplyOutcome& outcome) {
    auto event = [&](EventType type, Json payload) {
        outcome.events.push_back(TrainingEvent{type, next.step, next.branch_id, unix_now(), std::move(payload)});
    };

    switch (kind) {
    case CommandKind::update_optimizer: {
        std::string detail;
        if (args.contains("lr")) {
            next.optimizer.lr = args["lr"]["value"].get<double>();
            next.schedule_active = false;
            detail += "lr=" + format_double(next.optimizer.lr) + " ";
        }
        if (args.contains("momentum")) {
            next.optimizer.momentum = args["momentum"]["value"].get<double>();
            detail += "momentum=" + format_double(next.optimizer.momentum) + " ";
        }
        if (args.contains("weight_decay")) {
            next.optimizer.weight_decay = args["weight_decay"]["value"].get<double>();
            detail += "weight_decay=" + format_double(next.optimizer.weight_decay) + " ";
        }
        if (args.contains("grad_clip")) {
            const Json& v = args["grad_clip"]["value"];
            next.optimizer.grad_clip = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
            detail += "grad_clip=" + (v.is_null() ? std::string("none") : format_double(v.get<double>())) + " ";
        }
        if (!detail.empty()) {
            detail.pop_back();
        }
        outcome.detail = detail;
        break;
    }
    case CommandKind::pause_training:
        next.paused = true;
        outcome.detail = "paused at step " + std::to_string(next.step);
        break;
    case CommandKind::resume_training:
        next.paused = false;
        outcome.detail = "resumed at step " + std::to_string(next.step);
        break;
    case CommandKind::stop_training:
        next.stopping = true;
        outcome.detail = "stopping at step " + std::to_string(next.step);
        break;
    case CommandKind::save_checkpoint: {
        // Name the checkpoint after the command so a replayed run reproduces it.
        const Checkpoint ckpt = checkpoints_.save(next, config_hash_, uuid_of_command);
        event(EventType::checkpoint_saved, {{"uuid", ckpt.uuid}, {"step", ckpt.step}, {"branch_id", ckpt.branch_id}});
        outcome.detail = ckpt.uuid;
        break;
    }
    case CommandKind::load_checkpoint: {
        const std::string uuid = args.at("uuid").get<std::string>();
        Checkpoint ckpt = checkpoints_.load(uuid);
        if (ckpt.config_hash != config_hash_) {
            throw Error(ErrorCode::config_mismatch, "checkpoint " + uuid + " belongs to a different run configuration",
                        "uuid");
        }
        if (branches_.find(ckpt.branch_id) == nullptr) {
            throw Error(ErrorCode::unknown_checkpoint, "checkpoint branch " + ckpt.branch_id + " is not in this run",
                        "uuid");
        }
        TrainerState restored = std::move(ckpt.state);
        restored.paused = next.paused;
        restored.stopping = next.stopping;
        const BranchNode& node = branches_.fork(ckpt.branch_id, ckpt.step, uuid);
        restored.branch_id = node.branch_id;
        next = std::move(restored);
        event(EventType::branch_created,
              {{"branch_id", node.branch_id},
               {"parent_branch_id", ckpt.branch_id},
               {"fork_step", node.fork_step},
               {"fork_checkpoint_uuid", uuid}});
        outcome.long_running = true;
        outcome.detail = uuid;
        break;
    }
    case CommandKind::model_layer_operation: {
        const std::string name = args.at("layer").get<std::string>();
        const std::string op = args.at("op").get<std::string>();
        Layer* layer = next.model.find(name);
        if (layer == nullptr) {
            throw Error(ErrorCode::unknown_layer, "unknown layer \"" + name + "\"", "layer");
        }
        const std::size_t index = static_cast<std::size_t>(layer - next.model.layers.data());
        if (op == "reset") {
            std::fill(layer->weight.begin(), layer->weight.end(), 0.0);
            std::fill(layer->bias.begin(), layer->bias.end(), 0.0);
        } else if (op == "reinitialize") {
            reinitialize_layer(*layer, next.rng);
        } else {
            throw Error(ErrorCode::invalid_value, "unknown layer op \"" + op + "\"", "op");
        }
        auto& velocity = next.optimizer.velocity[index];
        std::fill(velocity.weight.begin(), velocity.weight.end(), 0.0);
        std::fill(velocity.bias.begin(), velocity.bias.end(), 0.0);
        outcome.detail = op + " " + name;
        break;
    }
    case CommandKind::model_layer_parameter_update: {
        const std::string name = args.at("layer").get<std::string>();
        const std::string param = args.at("param").get<std::string>();
        const double value = args.at("value").get<double>();
        Layer* layer = next.model.find(name);
        if (layer == nullptr) {
            throw Error(ErrorCode::unknown_layer, "unknown layer \"" + name + "\"", "layer");
        }
        if (param != "dropout_rate") {
            throw Error(ErrorCode::invalid_value, "unknown layer parameter \"" + param + "\"", "param");
        }
        if (!layer->dropout_rate) {
            throw Error(ErrorCode::invalid_value, "layer \"" + name + "\" has no dropout", "layer");
        }
        if (!(value >= 0.0 && value < 1.0)) {
            throw Error(ErrorCode::invalid_value, "dropout_rate must be in [0, 1)", "value");
        }
        layer->dropout_rate = value;
        outcome.detail = name + ".dropout_rate=" + format_double(value);
        break;
    }
    case CommandKind::update_dataset: {
        if (config_.task != TaskKind::mlp_sin) {
            throw Error(ErrorCode::invalid_value, "the quadratic task has no dataset", "source");
        }
        const std::string source = args.at("source").get<std::string>();
        const auto samples = load_samples(args.at("data_path").get<std::string>());
        next.dataset.update_data(source, samples);
        outcome.detail = source + ": " + std::to_string(samples.size()) + " examples, generation " +
                         std::to_string(next.dataset.generation());
        break;
    }
    case CommandKind::update_dataset_runtime_hyperparameters: {
        if (config_.task != TaskKind::mlp_sin) {
            throw Error(ErrorCode::invalid_value, "the quadratic task has no dataset", "weights");
        }
        InteractiveDataset::Weights weights;
        for (const auto& [name, w] : args.at("weights").items()) {
            weights.emplace(name, w.get<double>());
        }
        next.dataset.set_mixture_weights(weights);
        outcome.detail = "weights=" + args.at("weights").dump();
        break;
    }
    case CommandKind::do_evaluate: {
        const double val = validation_loss(next);
        event(EventType::evaluation_result, {{"val_loss", val}, {"step", next.step}});
        outcome.long_running = true;
        outcome.detail = "val_loss=" + format_double(val);
        break;
    }
    }
}

void Trainer::apply_and_resolve(const CommandEnvelope& envelope) {
    if (log_) {
        log_->append({state_.step, state_.branch_id, envelope});
    }
    ApplyOutcome outcome = apply_command(envelope);
    for (const auto& event : outcome.events) {
        sink_.publish(event);
    }
    if (outcome.status == CommandStatus::success && outcome.long_running) {
        source_.resolve(envelope.uuid, CommandStatus::completed, outcome.detail);
    }
    source_.resolve(envelope.uuid, outcome.status, outcome.detail);
}

TrainResult Trainer::run() {
    emit(EventType::branch_created, {{"branch_id", state_.branch_id},
                                     {"parent_branch_id", nullptr},
                                     {"fork_step", 0},
                                     {"fork_checkpoint_uuid", nullptr}});
    emit(EventType::log, {{"level", "info"},
                          {"message", "training started: " + std::to_string(config_.total_steps) + " steps"}});

    std::string reason = "completed";
    const auto delay = std::chrono::duration<double, std::milli>(config_.step_delay_ms);
    while (true) {
        if (state_.step >= config_.total_steps) {
            break;
        }
        if (boundary_hook_) {
            boundary_hook_(state_);
        }
        for (const auto& envelope : source_.poll(state_)) {
            if (state_.stopping) {
                if (log_) {
                    log_->append({state_.step, state_.branch_id, envelope});
                }
                source_.resolve(envelope.uuid, CommandStatus::failed, "training stopped");
                continue;
            }
            apply_and_resolve(envelope);
        }
        if (state_.stopping) {
            reason = "stopped";
            break;
        }
        if (state_.paused) {
            if (!source_.wait_for_commands(options_.pause_poll)) {
                reason = "source_exhausted";
                break;
            }
            continue;
        }
        if (state_.step >= config_.total_steps) {
            break;
        }
        step_once();
        if (delay.count() > 0.0) {
            std::this_thread::sleep_for(delay);
        }
    }
    emit(EventType::training_ended, {{"reason", reason}, {"optimizer_updates", updates_}});
    return {state_, reason, updates_};
}

}  // namespace itrain
