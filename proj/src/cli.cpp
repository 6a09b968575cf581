// SPDX-License-Identifier: Apache-2.0
#include "itrain/cli.hpp"

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <pthread.h>

#include "itrain/agent.hpp"
#include "itrain/client.hpp"
#include "itrain/config.hpp"
#include "itrain/http_server.hpp"
#include "itrain/replay.hpp"
#include "itrain/schedule.hpp"
#include "itrain/server.hpp"
#include "itrain/trainer.hpp"

namespace itrain {

namespace {

int exit_code_for(const Error& e) {
    switch (e.code()) {
    case ErrorCode::connection_error: return kExitConnection;
    default: return kExitValidation;
    }
}

// Blocks SIGINT/SIGTERM for this thread and its children and turns them into
// calls to `on_signal` from a watcher thread.
class SignalWatcher {
public:
    explicit SignalWatcher(std::function<void()> on_signal) {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, &previous_);
        thread_ = std::thread([this, on_signal = std::move(on_signal)] {
            const timespec tick{0, 100'000'000};
            while (!done_) {
                if (sigtimedwait(&set_, nullptr, &tick) > 0) {
                    on_signal();
                }
            }
        });
    }

    ~SignalWatcher() {
        done_ = true;
        thread_.join();
        pthread_sigmask(SIG_SETMASK, &previous_, nullptr);
    }

private:
    sigset_t set_{};
    sigset_t previous_{};
    std::atomic<bool> done_{false};
    std::thread thread_;
};

}  // namespace

int cmd_serve(const ServeOptions& options, std::ostream& out, std::ostream& err) {
    RunConfig config;
    std::vector<ScheduleEntry> schedule;
    try {
        config = RunConfig::load(options.config);
        if (options.schedule) {
            schedule = load_schedule(*options.schedule);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    if (std::filesystem::exists(options.run_dir / "interventions.jsonl")) {
        err << "error: " << options.run_dir.string() << " already holds a run; pick another --run-dir\n";
        return kExitValidation;
    }
    std::filesystem::create_directories(options.run_dir);
    {
        std::ofstream cfg(options.run_dir / "config.json");
        cfg << config.to_json().dump(2) << '\n';
    }

    std::optional<SignalWatcher> signals;
    ControlServer server(ServerOptions{options.run_dir, 1024, nullptr});
    auto request_stop = [&server] {
        if (server.run_status() != RunStatus::stopped) {
            (void)server.submit(make_envelope("stop_training", Json::object()));
        }
    };
    if (options.handle_signals) {
        signals.emplace(request_stop);
    }

    HttpServer http(server, HttpOptions{options.host, options.port, std::nullopt});
    try {
        http.start();
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConnection;
    }
    out << "listening on http://" << options.host << ":" << http.port() << '\n' << std::flush;

    TrainerOptions trainer_options;
    trainer_options.run_dir = options.run_dir;
    Trainer trainer(config, server, server, trainer_options);
    ScheduleDriver driver(server, std::move(schedule));
    if (options.schedule) {
        trainer.set_boundary_hook([&driver](const TrainerState& state) { driver.on_boundary(state); });
    }
    if (options.on_ready) {
        options.on_ready(http.port(), request_stop);
    }

    const TrainResult result = trainer.run();
    out << "training ended (" << result.reason << ") after " << result.optimizer_updates << " updates at step "
        << result.state.step << " on " << result.state.branch_id << '\n'
        << std::flush;
    if (options.linger.count() > 0) {
        std::this_thread::sleep_for(options.linger);
    }
    http.stop();
    server.shutdown();
    return kExitOk;
}

Json parse_kv_args(std::string_view command, const std::vector<std::string>& pairs) {
    static const std::set<std::string, std::less<>> kStringKeys = {"uuid", "layer", "op", "param", "source", "data_path"};
    Json args = Json::object();
    for (const auto& pair : pairs) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw Error(ErrorCode::invalid_args, "argument \"" + pair + "\" is not key=value", "args");
        }
        const std::string key = pair.substr(0, eq);
        const std::string raw = pair.substr(eq + 1);
        Json value = Json::parse(raw, nullptr, false);
        if (value.is_discarded() || kStringKeys.contains(key)) {
            value = raw;
        }
        Json* node = &args;
        std::string_view rest = key;
        while (true) {
            const auto dot = rest.find('.');
            const std::string part(rest.substr(0, dot));
            if (part.empty()) {
                throw Error(ErrorCode::invalid_args, "empty key segment in \"" + key + "\"", "args");
            }
            if (dot == std::string_view::npos) {
                (*node)[part] = value;
                break;
            }
            Json& child = (*node)[part];
            if (child.is_null()) {
                child = Json::object();
            } else if (!child.is_object()) {
                throw Error(ErrorCode::invalid_args, "key \"" + key + "\" conflicts with an earlier value", "args");
            }
            node = &child;
            rest.remove_prefix(dot + 1);
        }
    }
    if (command == "update_optimizer") {
        for (auto& [key, value] : args.items()) {
            if (!value.is_object()) {
                value = Json{{"value", value}};
            }
        }
    }
    return args;
}

int cmd_send(const SendOptions& options, std::ostream& out, std::ostream& err) {
    CommandEnvelope envelope;
    try {
        envelope = make_envelope(options.command, parse_kv_args(options.command, options.args));
        validate_envelope(envelope);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    try {
        ControlClient client(options.url);
        const HttpResponse response = client.post_command(envelope);
        if (response.status != 200) {
            if (options.json) {
                out << Json{{"uuid", envelope.uuid}, {"http_status", response.status}, {"response", response.body}}
                           .dump()
                    << '\n';
            }
            err << "rejected (" << response.status << "): " << response.body.value("error", "") << '\n';
            return kExitValidation;
        }
        if (!options.wait) {
            if (options.json) {
                out << response.body.dump() << '\n';
            } else {
                out << envelope.uuid << ' ' << response.body.value("status", "pending") << '\n';
            }
            return kExitOk;
        }
        const auto record = client.wait_terminal(envelope.uuid, options.timeout);
        if (!record) {
            err << "timed out waiting for " << envelope.uuid << '\n';
            return kExitConnection;
        }
        const std::string status = record->at("status").get<std::string>();
        std::string detail;
        const auto& timeline = record->at("timeline");
        if (!timeline.empty()) {
            detail = timeline.back().value("detail", "");
        }
        if (options.json) {
            out << record->dump() << '\n';
        } else {
            out << envelope.uuid << ' ' << status;
            if (!detail.empty()) {
                out << ": " << detail;
            }
            out << '\n';
        }
        return status == "success" ? kExitOk : kExitValidation;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

int cmd_agent(const AgentOptions& options, std::ostream& out, std::ostream& err) {
    if (options.cadence == 0) {
        err << "error: cadence must be at least 1\n";
        return kExitValidation;
    }
    std::unique_ptr<DecisionPolicy> policy;
    try {
        if (options.policy == "rule") {
            policy = std::make_unique<RulePolicy>();
        } else if (options.policy == "llm") {
            LlmOptions llm;
            llm.endpoint = options.llm_endpoint;
            llm.model = options.llm_model;
            if (options.template_path) {
                std::ifstream in(*options.template_path);
                if (!in) {
                    throw Error(ErrorCode::io_error, "cannot read template " + options.template_path->string());
                }
                std::ostringstream text;
                text << in.rdbuf();
                llm.prompt_template = text.str();
            }
            policy = std::make_unique<LlmPolicy>(std::move(llm));
        } else {
            throw Error(ErrorCode::invalid_value, "policy must be rule or llm", "policy");
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    }

    std::optional<ControlClient> client;
    try {
        client.emplace(options.url);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    AgentLoop loop(*policy, options.cadence, [&client](const CommandEnvelope& envelope) {
        const HttpResponse response = client->post_command(envelope);
        if (response.status != 200) {
            throw Error(ErrorCode::invalid_value, "server rejected command: " + response.body.value("error", ""));
        }
    });

    std::size_t reported = 0;
    int failures = 0;
    while (true) {
        std::unique_ptr<EventStream> stream;
        try {
            stream = std::make_unique<EventStream>(options.url);
            failures = 0;
        } catch (const Error& e) {
            if (++failures > options.reconnect_attempts) {
                err << "error: " << e.what() << '\n';
                return kExitConnection;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(100) * (1 << failures));
            continue;
        }
        while (true) {
            auto event = stream->next(std::chrono::milliseconds(500));
            if (!event) {
                if (stream->finished()) {
                    break;
                }
                continue;
            }
            if (event->type == EventType::state_snapshot &&
                event->payload.value("run_status", "") == std::string("stopped")) {
                out << "run already ended\n";
                return kExitOk;
            }
            loop.observe(*event);
            for (; reported < loop.steps().size(); ++reported) {
                const AgentStep& s = loop.steps()[reported];
                out << "step " << s.step << " lr " << s.lr << " -> " << to_string(s.decision.action);
                if (!s.decision.explanation.empty()) {
                    out << " (" << s.decision.explanation << ")";
                }
                if (!s.error.empty()) {
                    out << " error: " << s.error;
                }
                out << '\n' << std::flush;
            }
            if (event->type == EventType::training_ended) {
                return kExitOk;
            }
        }
        err << "event stream closed; reconnecting\n";
    }
}

int cmd_replay(const std::filesystem::path& run_dir, bool json, std::ostream& out, std::ostream& err) {
    ReplayReport report;
    try {
        report = verify_run(run_dir);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        if (json) {
            out << Json{{"identical", false}, {"error", e.what()}}.dump() << '\n';
        }
        return e.code() == ErrorCode::config_mismatch ? kExitMismatch : kExitValidation;
    }
    if (json) {
        out << Json{{"identical", report.identical},
                    {"branches", report.branches},
                    {"lines", report.lines},
                    {"mismatches", report.mismatches}}
                   .dump()
            << '\n';
    } else {
        out << (report.identical ? "identical" : "MISMATCH") << ": " << report.branches << " logs, " << report.lines
            << " lines compared\n";
        for (const auto& m : report.mismatches) {
            out << "  " << m << '\n';
        }
    }
    return report.identical ? kExitOk : kExitMismatch;
}

int cmd_schedule(const ScheduleOptions& options, std::ostream& out, std::ostream& err) {
    std::vector<ScheduleEntry> entries;
    try {
        entries = load_schedule(options.file);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    try {
        ControlClient client(options.url);
        std::size_t next = 0;
        while (next < entries.size()) {
            const Json state = client.get_ok("/state");
            if (state.at("run_status") == "stopped") {
                err << "run ended with " << entries.size() - next << " schedule entries unsent\n";
                return kExitValidation;
            }
            const std::uint64_t step = state.at("step").get<std::uint64_t>();
            while (next < entries.size() && entries[next].at_step <= step) {
                const ScheduleEntry& entry = entries[next++];
                const auto response = client.post_command(make_envelope(entry.command, entry.args));
                out << "step " << step << " " << entry.command << " -> " << response.status << ' '
                    << response.body.dump() << '\n'
                    << std::flush;
            }
            std::this_thread::sleep_for(options.poll);
        }
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

}  // namespace itrain
